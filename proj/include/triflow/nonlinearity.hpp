#pragma once

#include <string_view>

#include "triflow/types.hpp"

namespace triflow {

// Activations usable in a monotonic unit. Both are odd and strictly
// increasing; Tanh is bounded, LogSym (sign(x)*ln(1+|x|)) is not, which makes
// a LogSym flow bijective on all of R^N.
enum class Nonlinearity { Tanh, LogSym };

struct PhiEval {
  double phi;
  double dphi;
  double ddphi;
};

// Value, first and second derivative at x. LogSym uses sign(0) = 0, so its
// second derivative vanishes at the origin.
PhiEval nonlinearity_eval(Nonlinearity kind, double x);

// Elementwise batch form; outputs are resized to z's shape.
void nonlinearity_eval(Nonlinearity kind, const Matrix& z, Matrix& phi,
                       Matrix& dphi, Matrix& ddphi);

// ln(1 + e^raw), evaluated on the overflow-safe branch.
double softplus_reparam(double raw);
// Inverse map, ln(e^y - 1) for y > 0.
double softplus_inverse(double positive);
// d/draw softplus(raw) = sigmoid(raw).
double softplus_slope(double raw);

Vector softplus_reparam(const Vector& raw);
Vector softplus_slope(const Vector& raw);

const char* to_string(Nonlinearity kind);
// Accepts "tanh" and "log".
Nonlinearity parse_nonlinearity(std::string_view name);

}  // namespace triflow
