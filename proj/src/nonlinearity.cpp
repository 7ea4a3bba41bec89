#include "triflow/nonlinearity.hpp"

#include <cmath>
#include <string>

namespace triflow {

double softplus_reparam(double raw) {
  return raw > 0.0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
}

double softplus_inverse(double positive) {
  // e^y - 1 == e^y to double precision beyond ~36
  return positive > 36.0 ? positive : std::log(std::expm1(positive));
}

double softplus_slope(double raw) {
  if (raw > 0.0) return 1.0 / (1.0 + std::exp(-raw));
  const double e = std::exp(raw);
  return e / (1.0 + e);
}

Vector softplus_reparam(const Vector& raw) {
  return raw.unaryExpr([](double r) { return softplus_reparam(r); });
}

Vector softplus_slope(const Vector& raw) {
  return raw.unaryExpr([](double r) { return softplus_slope(r); });
}

PhiEval nonlinearity_eval(Nonlinearity kind, double x) {
  if (kind == Nonlinearity::Tanh) {
    const double t = std::tanh(x);
    const double d = 1.0 - t * t;
    return {t, d, -2.0 * t * d};
  }
  const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
  const double w = 1.0 + std::abs(x);
  return {s * std::log(w), 1.0 / w, -s / (w * w)};
}

void nonlinearity_eval(Nonlinearity kind, const Matrix& z, Matrix& phi,
                       Matrix& dphi, Matrix& ddphi) {
  if (kind == Nonlinearity::Tanh) {
    phi = z.array().tanh();
    dphi = 1.0 - phi.array().square();
    ddphi = -2.0 * phi.array() * dphi.array();
    return;
  }
  const auto sign = z.array().sign();  // sign(0) = 0
  const auto w = 1.0 + z.array().abs();
  phi = sign * w.log();
  dphi = w.inverse();
  ddphi = -sign * dphi.array().square();
}

const char* to_string(Nonlinearity kind) {
  return kind == Nonlinearity::Tanh ? "tanh" : "log";
}

Nonlinearity parse_nonlinearity(std::string_view name) {
  if (name == "tanh") return Nonlinearity::Tanh;
  if (name == "log") return Nonlinearity::LogSym;
  throw ConfigError("unknown nonlinearity '" + std::string(name) +
                    "' (expected tanh|log)");
}

}  // namespace triflow
