#include "triflow/grad.hpp"

#include <cmath>
#include <string>

namespace triflow {

GradientSet zeros_like(const FlowModel& model) {
  GradientSet g;
  g.layers.reserve(model.layers.size());
  for (const TriUnit& t : model.layers) {
    LayerGrads lg;
    lg.d_packed = Matrix::Zero(t.packed.rows(), t.packed.cols());
    lg.d_v_diag_raw = Vector::Zero(t.v_diag_raw.size());
    lg.d_a = Vector::Zero(t.a.size());
    lg.d_b = Vector::Zero(t.b.size());
    g.layers.push_back(std::move(lg));
  }
  return g;
}

namespace {

// Backward through one unit. gy is dE/d(unit output), summed over the batch
// columns; on return gx holds dE/d(unit input). Includes this layer's own
// -sum_n log d_n term, which needs phi'' because d_n depends on z.
void unit_backward(const TriUnit& t, const UnitTrace& tr, const Matrix& gy,
                   LayerGrads& out, Matrix& gx) {
  const Index N = t.n_dim;
  const Index B = t.block_size;
  const Index M = gy.cols();

  const Vector v_diag = softplus_reparam(t.v_diag_raw);
  const Vector v_slope = softplus_slope(t.v_diag_raw);
  Vector u_diag(N * B), u_slope(N * B);
  for (Index n = 0; n < N; ++n) {
    u_diag.segment(n * B, B) =
        softplus_reparam(Vector(t.packed.block(n * B, n, B, 1)));
    u_slope.segment(n * B, B) =
        softplus_slope(Vector(t.packed.block(n * B, n, B, 1)));
  }

  const Matrix dinv = tr.diag.cwiseInverse();  // N x M

  // gh = V^T gy ; gz = phi' . gh - (u v / d) . phi''
  Matrix gz(N * B, M);
  for (Index n = 0; n < N; ++n) {
    auto gzb = gz.middleRows(n * B, B);
    gzb.noalias() = v_diag.segment(n * B, B) * gy.row(n);
    if (n + 1 < N) {
      gzb.noalias() +=
          t.packed.block(n * B, n + 1, B, N - n - 1) * gy.bottomRows(N - n - 1);
    }
    gzb.array() *= tr.dphi.middleRows(n * B, B).array();
    const Vector uv =
        u_diag.segment(n * B, B).cwiseProduct(v_diag.segment(n * B, B));
    gzb.array() -= (uv * dinv.row(n)).array() *
                   tr.ddphi.middleRows(n * B, B).array();
  }

  out.d_a = gz.rowwise().sum();
  out.d_b = gy.rowwise().sum();

  out.d_packed.resize(N * B, N);
  out.d_packed.setZero();
  out.d_v_diag_raw.resize(N * B);
  for (Index n = 0; n < N; ++n) {
    // U region: columns 0..n of block row n (diagonal column through the
    // softplus chain plus the direct -v phi'/d term from the log diag)
    if (n > 0) {
      out.d_packed.block(n * B, 0, B, n).noalias() =
          gz.middleRows(n * B, B) * tr.x.topRows(n).transpose();
    }
    const Vector dphi_dinv =
        tr.dphi.middleRows(n * B, B) * dinv.row(n).transpose();  // B
    Vector d_u = gz.middleRows(n * B, B) * tr.x.row(n).transpose();
    d_u -= v_diag.segment(n * B, B).cwiseProduct(dphi_dinv);
    out.d_packed.block(n * B, n, B, 1) =
        d_u.cwiseProduct(u_slope.segment(n * B, B));

    // off(V^T) region: d V[j, nB+i] = sum_m gy[j,m] phi[nB+i,m] for j > n
    if (n + 1 < N) {
      out.d_packed.block(n * B, n + 1, B, N - n - 1).noalias() =
          tr.phi.middleRows(n * B, B) * gy.bottomRows(N - n - 1).transpose();
    }

    Vector d_v = tr.phi.middleRows(n * B, B) * gy.row(n).transpose();
    d_v -= u_diag.segment(n * B, B).cwiseProduct(dphi_dinv);
    out.d_v_diag_raw.segment(n * B, B) =
        d_v.cwiseProduct(v_slope.segment(n * B, B));
  }

  // gx = U^T gz
  gx.resize(N, M);
  for (Index j = 0; j < N; ++j) {
    gx.row(j).noalias() =
        u_diag.segment(j * B, B).transpose() * gz.middleRows(j * B, B);
    const Index below = N * B - (j + 1) * B;
    if (below > 0) {
      gx.row(j).noalias() += t.packed.col(j).tail(below).transpose() *
                             gz.bottomRows(below);
    }
  }
}

}  // namespace

GradientSet nll_backward(const FlowModel& model, const ForwardTrace& trace,
                         const Matrix& y) {
  const std::size_t L = model.layers.size();
  if (trace.layers.size() != L) {
    throw ConfigError("nll_backward: trace does not match the model");
  }
  GradientSet g;
  g.layers.resize(L);
  Matrix adj = y;  // d(0.5 y^T y)/dy
  for (std::size_t l = L; l-- > 0;) {
    if (model.flip_after[l]) {
      adj = adj.colwise().reverse().eval();
    }
    Matrix gx;
    unit_backward(model.layers[l], trace.layers[l], adj, g.layers[l], gx);
    adj = std::move(gx);
  }
  if (!all_finite(g)) {
    throw ToleranceNotReached("nll_backward: non-finite adjoints (divergence)");
  }
  return g;
}

GradientSet nll_backward(const FlowModel& model, const ForwardTrace& trace,
                         const Vector& y) {
  return nll_backward(model, trace, Matrix(y));
}

double finite_diff_check(const FlowModel& model, const Vector& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ConfigError("finite_diff_check: eps must be in [1e-7, 1e-3]");
  }
  FlowModel work = model;
  ForwardTrace trace;
  Matrix y;
  Vector logdet;
  flow_forward(work, Matrix(x), y, logdet, &trace);
  GradientSet g = nll_backward(work, trace, y);

  auto params = parameter_blocks(work);
  auto grads = gradient_blocks(g);
  double worst = 0.0;
  for (std::size_t blk = 0; blk < params.size(); ++blk) {
    double* p = params[blk].first;
    const double* gp = grads[blk].first;
    for (Index i = 0; i < params[blk].second; ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = flow_nll(work, x)(0);
      p[i] = saved - eps;
      const double down = flow_nll(work, x)(0);
      p[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double denom = std::max(std::abs(fd), std::abs(gp[i]));
      const double err = denom < 1e-7 ? std::abs(gp[i] - fd)
                                      : std::abs(gp[i] - fd) / denom;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

L1Result l1_subgradient(const FlowModel& model, double eta) {
  if (eta < 0) throw ConfigError("l1_subgradient: eta must be >= 0");
  L1Result r{0.0, zeros_like(model)};
  auto params = parameter_blocks(model);
  auto grads = gradient_blocks(r.grads);
  for (std::size_t blk = 0; blk < params.size(); ++blk) {
    const double* p = params[blk].first;
    double* gp = grads[blk].first;
    for (Index i = 0; i < params[blk].second; ++i) {
      r.penalty += std::abs(p[i]);
      gp[i] = p[i] > 0 ? eta : (p[i] < 0 ? -eta : 0.0);
    }
  }
  r.penalty *= eta;
  return r;
}

void axpy(double alpha, const GradientSet& g, GradientSet& acc) {
  for (std::size_t l = 0; l < acc.layers.size(); ++l) {
    acc.layers[l].d_packed += alpha * g.layers[l].d_packed;
    acc.layers[l].d_v_diag_raw += alpha * g.layers[l].d_v_diag_raw;
    acc.layers[l].d_a += alpha * g.layers[l].d_a;
    acc.layers[l].d_b += alpha * g.layers[l].d_b;
  }
}

void scale(GradientSet& g, double alpha) {
  for (LayerGrads& lg : g.layers) {
    lg.d_packed *= alpha;
    lg.d_v_diag_raw *= alpha;
    lg.d_a *= alpha;
    lg.d_b *= alpha;
  }
}

bool all_finite(const GradientSet& g) {
  for (const LayerGrads& lg : g.layers) {
    if (!lg.d_packed.allFinite() || !lg.d_v_diag_raw.allFinite() ||
        !lg.d_a.allFinite() || !lg.d_b.allFinite()) {
      return false;
    }
  }
  return true;
}

double max_abs(const GradientSet& g) {
  double m = 0.0;
  for (const LayerGrads& lg : g.layers) {
    m = std::max(m, lg.d_packed.cwiseAbs().maxCoeff());
    m = std::max(m, lg.d_v_diag_raw.cwiseAbs().maxCoeff());
    m = std::max(m, lg.d_a.cwiseAbs().maxCoeff());
    m = std::max(m, lg.d_b.cwiseAbs().maxCoeff());
  }
  return m;
}

namespace {

template <class ModelT, class Ptr>
std::vector<std::pair<Ptr, Index>> blocks_of(ModelT& model) {
  std::vector<std::pair<Ptr, Index>> out;
  out.reserve(model.layers.size() * 4);
  for (auto& t : model.layers) {
    out.emplace_back(t.packed.data(), t.packed.size());
    out.emplace_back(t.v_diag_raw.data(), t.v_diag_raw.size());
    out.emplace_back(t.a.data(), t.a.size());
    out.emplace_back(t.b.data(), t.b.size());
  }
  return out;
}

template <class GradT, class Ptr>
std::vector<std::pair<Ptr, Index>> grad_blocks_of(GradT& g) {
  std::vector<std::pair<Ptr, Index>> out;
  out.reserve(g.layers.size() * 4);
  for (auto& lg : g.layers) {
    out.emplace_back(lg.d_packed.data(), lg.d_packed.size());
    out.emplace_back(lg.d_v_diag_raw.data(), lg.d_v_diag_raw.size());
    out.emplace_back(lg.d_a.data(), lg.d_a.size());
    out.emplace_back(lg.d_b.data(), lg.d_b.size());
  }
  return out;
}

}  // namespace

std::vector<std::pair<double*, Index>> parameter_blocks(FlowModel& model) {
  return blocks_of<FlowModel, double*>(model);
}

std::vector<std::pair<const double*, Index>> parameter_blocks(
    const FlowModel& model) {
  return blocks_of<const FlowModel, const double*>(model);
}

std::vector<std::pair<double*, Index>> gradient_blocks(GradientSet& g) {
  return grad_blocks_of<GradientSet, double*>(g);
}

std::vector<std::pair<const double*, Index>> gradient_blocks(
    const GradientSet& g) {
  return grad_blocks_of<const GradientSet, const double*>(g);
}

Index parameter_count(const FlowModel& model) {
  Index n = 0;
  for (const auto& blk : parameter_blocks(model)) n += blk.second;
  return n;
}

}  // namespace triflow
