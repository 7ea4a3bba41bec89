#pragma once

#include <random>

#include "triflow/flow.hpp"
#include "triflow/grad.hpp"

// Shared helpers for the test and acceptance suites. The numerical Jacobian
// here is the independent oracle: it only ever calls the forward map as a
// black box, never the analytic log-diagonal path it is used to verify.
namespace testsupport {

using triflow::FlowModel;
using triflow::Index;
using triflow::Matrix;
using triflow::Nonlinearity;
using triflow::Vector;

inline Vector forward_only(const FlowModel& model, const Vector& x) {
  Matrix y;
  Vector ld;
  triflow::flow_forward(model, Matrix(x), y, ld, nullptr);
  return y.col(0);
}

inline Matrix numerical_jacobian(const FlowModel& model, const Vector& x,
                                 double eps = 1e-5) {
  const Index n = x.size();
  Matrix jac(n, n);
  for (Index j = 0; j < n; ++j) {
    Vector xp = x, xm = x;
    xp(j) += eps;
    xm(j) -= eps;
    jac.col(j) = (forward_only(model, xp) - forward_only(model, xm)) / (2 * eps);
  }
  return jac;
}

inline double dense_log_abs_det(const Matrix& jac) {
  return Eigen::PartialPivLU<Matrix>(jac)
      .matrixLU()
      .diagonal()
      .array()
      .abs()
      .log()
      .sum();
}

// make_flow initialization plus parameter noise, so tests run on units whose
// off-diagonal structure actually participates.
inline FlowModel random_model(Index n_dim, Index block_size, Index n_layers,
                              Nonlinearity kind, bool flip, std::uint64_t seed,
                              double roughness = 0.3) {
  FlowModel model =
      triflow::make_flow(n_dim, block_size, n_layers, kind, flip, seed);
  std::mt19937_64 rng(triflow::mix_seed(seed, 0x7ea8));
  std::normal_distribution<double> g(0.0, roughness);
  for (auto& blk : triflow::parameter_blocks(model)) {
    for (Index i = 0; i < blk.second; ++i) blk.first[i] += g(rng);
  }
  return model;
}

inline Vector random_vector(Index n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(triflow::mix_seed(seed, 0x7eef));
  std::normal_distribution<double> g(0.0, scale);
  Vector x(n);
  for (Index i = 0; i < n; ++i) x(i) = g(rng);
  return x;
}

}  // namespace testsupport
