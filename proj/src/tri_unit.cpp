#include "triflow/tri_unit.hpp"

#include <cmath>
#include <string>

namespace triflow {

namespace {

constexpr double kDiagFloor = 1e-300;

void check_dims(Index n_dim, Index block_size) {
  if (n_dim < 1 || block_size < 1) {
    throw ConfigError("invalid unit dimensions: n_dim=" + std::to_string(n_dim) +
                      " block_size=" + std::to_string(block_size));
  }
}

}  // namespace

PackedMasks build_masks(Index n_dim, Index block_size) {
  check_dims(n_dim, block_size);
  const Index rows = n_dim * block_size;
  PackedMasks m;
  m.u = BoolMatrix::Constant(rows, n_dim, false);
  m.v_off = BoolMatrix::Constant(rows, n_dim, false);
  for (Index n = 0; n < n_dim; ++n) {
    m.u.block(n * block_size, 0, block_size, n + 1).setConstant(true);
    m.v_off.block(n * block_size, n + 1, block_size, n_dim - n - 1)
        .setConstant(true);
  }
  return m;
}

Materialized materialize(const TriUnit& t) {
  const Index N = t.n_dim;
  const Index B = t.block_size;
  Materialized out;
  out.u = Matrix::Zero(N * B, N);
  out.v = Matrix::Zero(N, N * B);
  for (Index n = 0; n < N; ++n) {
    out.u.block(n * B, 0, B, n) = t.packed.block(n * B, 0, B, n);
    out.u.block(n * B, n, B, 1) =
        t.packed.block(n * B, n, B, 1).unaryExpr([](double r) {
          return softplus_reparam(r);
        });
    out.v.row(n).head(n * B) = t.packed.col(n).head(n * B).transpose();
    out.v.row(n).segment(n * B, B) =
        softplus_reparam(t.v_diag_raw.segment(n * B, B)).transpose();
  }
  return out;
}

void pack_parameters(const Matrix& u, const Matrix& v, TriUnit& t) {
  const Index N = t.n_dim;
  const Index B = t.block_size;
  t.packed.resize(N * B, N);
  t.packed.setZero();
  t.v_diag_raw.resize(N * B);
  for (Index n = 0; n < N; ++n) {
    t.packed.block(n * B, 0, B, n) = u.block(n * B, 0, B, n);
    t.packed.block(n * B, n, B, 1) =
        u.block(n * B, n, B, 1).unaryExpr([](double d) {
          return softplus_inverse(d);
        });
    t.packed.col(n).head(n * B) = v.row(n).head(n * B).transpose();
    t.v_diag_raw.segment(n * B, B) =
        v.row(n).segment(n * B, B).transpose().unaryExpr([](double d) {
          return softplus_inverse(d);
        });
  }
}

void unit_forward(const TriUnit& t, const Matrix& x, Matrix& y, Matrix& log_diag,
                  UnitTrace* trace) {
  const Index N = t.n_dim;
  const Index B = t.block_size;
  const Index M = x.cols();
  if (x.rows() != N) {
    throw ConfigError("unit_forward: input has " + std::to_string(x.rows()) +
                      " rows, unit expects " + std::to_string(N));
  }

  // z = U x + a, walking the block rows of the packed matrix so the masks
  // never exist as data
  Matrix z = t.a.replicate(1, M);
  for (Index n = 0; n < N; ++n) {
    auto zb = z.middleRows(n * B, B);
    if (n > 0) {
      zb.noalias() += t.packed.block(n * B, 0, B, n) * x.topRows(n);
    }
    zb.noalias() += t.packed.block(n * B, n, B, 1).unaryExpr([](double r) {
      return softplus_reparam(r);
    }) * x.row(n);
  }

  Matrix phi, dphi, ddphi;
  nonlinearity_eval(t.nonlinearity, z, phi, dphi, ddphi);

  // y = V phi + b; V's rows live in packed columns plus the separate diagonal
  y = t.b.replicate(1, M);
  Matrix diag(N, M);
  for (Index n = 0; n < N; ++n) {
    if (n > 0) {
      y.row(n).noalias() +=
          t.packed.col(n).head(n * B).transpose() * phi.topRows(n * B);
    }
    const Vector v_n = softplus_reparam(t.v_diag_raw.segment(n * B, B));
    y.row(n).noalias() += v_n.transpose() * phi.middleRows(n * B, B);
    const Vector uv = t.packed.block(n * B, n, B, 1)
                          .unaryExpr([](double r) { return softplus_reparam(r); })
                          .cwiseProduct(v_n);
    diag.row(n).noalias() = uv.transpose() * dphi.middleRows(n * B, B);
  }

  log_diag = diag.cwiseMax(kDiagFloor).array().log();

  if (trace != nullptr) {
    trace->x = x;
    trace->z = std::move(z);
    trace->phi = std::move(phi);
    trace->dphi = std::move(dphi);
    trace->ddphi = std::move(ddphi);
    trace->diag = std::move(diag);
  }
}

UnitForwardResult unit_forward(const TriUnit& t, const Vector& x) {
  UnitForwardResult r;
  Matrix y, ld;
  unit_forward(t, x, y, ld, &r.trace);
  r.y = y.col(0);
  r.log_diag = ld.col(0);
  return r;
}

}  // namespace triflow
