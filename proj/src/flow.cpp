#include "triflow/flow.hpp"

#include <cmath>
#include <numbers>

namespace triflow {

FlowModel make_flow(Index n_dim, Index block_size, Index n_layers,
                    Nonlinearity kind, bool flip, std::uint64_t seed) {
  if (n_layers < 1) throw ConfigError("make_flow: n_layers must be >= 1");
  FlowModel model;
  model.layers.reserve(static_cast<std::size_t>(n_layers));
  const double diag_raw = softplus_inverse(1.0 / std::sqrt(double(block_size)));
  const double off_std = 0.01 / std::sqrt(double(n_dim));
  for (Index l = 0; l < n_layers; ++l) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(l));
    std::normal_distribution<double> gauss(0.0, off_std);
    TriUnit t;
    t.n_dim = n_dim;
    t.block_size = block_size;
    t.nonlinearity = kind;
    t.packed.resize(n_dim * block_size, n_dim);
    for (Index c = 0; c < n_dim; ++c) {
      for (Index r = 0; r < n_dim * block_size; ++r) {
        t.packed(r, c) = gauss(rng);
      }
    }
    t.v_diag_raw = Vector::Constant(n_dim * block_size, diag_raw);
    for (Index n = 0; n < n_dim; ++n) {
      t.packed.block(n * block_size, n, block_size, 1).setConstant(diag_raw);
    }
    t.a = Vector::Zero(n_dim * block_size);
    t.b = Vector::Zero(n_dim);
    model.layers.push_back(std::move(t));
    model.flip_after.push_back(flip);
  }
  return model;
}

Vector flip(const Vector& x) { return x.reverse(); }

void flow_forward(const FlowModel& model, const Matrix& x, Matrix& y,
                  Vector& logdet, ForwardTrace* trace) {
  const Index M = x.cols();
  logdet = Vector::Zero(M);
  if (trace != nullptr) {
    trace->layers.resize(model.layers.size());
  }
  Matrix cur = x;
  Matrix out, log_diag;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    UnitTrace* ut = trace != nullptr ? &trace->layers[l] : nullptr;
    unit_forward(model.layers[l], cur, out, log_diag, ut);
    logdet.noalias() += log_diag.colwise().sum().transpose();
    if (model.flip_after[l]) {
      cur = out.colwise().reverse();
    } else {
      cur = std::move(out);
    }
  }
  y = std::move(cur);
  if (trace != nullptr) {
    trace->output = y;
    trace->logdet = logdet;
  }
}

FlowForwardResult flow_forward(const FlowModel& model, const Vector& x) {
  FlowForwardResult r;
  Matrix y;
  Vector ld;
  flow_forward(model, x, y, ld, &r.trace);
  r.y = y.col(0);
  r.logdet = ld(0);
  return r;
}

double nll(const Vector& y, double logdet) {
  constexpr double half_log_2pi = 0.9189385332046727;
  return -logdet + 0.5 * y.squaredNorm() +
         half_log_2pi * static_cast<double>(y.size());
}

Vector nll(const Matrix& y, const Vector& logdet) {
  constexpr double half_log_2pi = 0.9189385332046727;
  return 0.5 * y.colwise().squaredNorm().transpose() - logdet +
         Vector::Constant(y.cols(), half_log_2pi * double(y.rows()));
}

Vector flow_nll(const FlowModel& model, const Matrix& x) {
  Matrix y;
  Vector logdet;
  flow_forward(model, x, y, logdet, nullptr);
  return nll(y, logdet);
}

}  // namespace triflow
