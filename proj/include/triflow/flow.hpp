#pragma once

#include <cstdint>
#include <vector>

#include "triflow/tri_unit.hpp"

namespace triflow {

// A stack of monotonic triangular units with an optional order-reversing
// permutation after each one. Values are immutable during evaluation and safe
// for concurrent read-only use.
struct FlowModel {
  std::vector<TriUnit> layers;
  std::vector<bool> flip_after;  // one flag per layer
  bool norm_absorbed = false;

  Index n_dim() const { return layers.empty() ? 0 : layers.front().n_dim; }
  Index n_layers() const { return static_cast<Index>(layers.size()); }
};

// Near-identity-scale initialization: block-diagonal raws at
// softplus^-1(1/sqrt(B)) so sum_i u v phi' starts O(1), off-block raw entries
// ~ N(0, 0.01/sqrt(N)), a = b = 0.
FlowModel make_flow(Index n_dim, Index block_size, Index n_layers,
                    Nonlinearity kind, bool flip, std::uint64_t seed);

// Order reversal; an involution.
Vector flip(const Vector& x);

struct ForwardTrace {
  std::vector<UnitTrace> layers;
  Matrix output;  // N x M final outputs
  Vector logdet;  // per sample
};

// Applies each unit, then its flip when flagged. logdet is the sum of the
// per-layer diagonal logs; flips contribute nothing. `trace` may be null.
void flow_forward(const FlowModel& model, const Matrix& x, Matrix& y,
                  Vector& logdet, ForwardTrace* trace);

struct FlowForwardResult {
  Vector y;
  double logdet;
  ForwardTrace trace;
};

FlowForwardResult flow_forward(const FlowModel& model, const Vector& x);

// Negative log likelihood under a standard normal base:
// -logdet + 0.5 y^T y + 0.5 N ln(2 pi), in nats.
double nll(const Vector& y, double logdet);
Vector nll(const Matrix& y, const Vector& logdet);

// Per-sample NLLs of a batch (columns are samples); no trace retained.
Vector flow_nll(const FlowModel& model, const Matrix& x);

}  // namespace triflow
