#pragma once

#include "triflow/nonlinearity.hpp"

namespace triflow {

// One monotonic triangular unit y = V phi(U x + a) + b with x, y in R^N.
// U is (N*B)xN with (B,1) blocks and V is Nx(N*B) with (1,B) blocks; both are
// block-lower-triangular and their block diagonals are kept strictly positive
// through a softplus reparameterization of unconstrained raw values.
//
// Storage: `packed` holds U in its block-lower triangle (block-diagonal
// entries are the raw, pre-softplus values) and off(V^T) in the strictly
// block-upper region. V's block diagonal lives separately in `v_diag_raw`.
// The masks separating the two regions are a pure function of (N, B) and are
// regenerated on the fly, never stored.
struct TriUnit {
  Index n_dim = 0;      // N
  Index block_size = 0; // B
  Matrix packed;        // (N*B) x N
  Vector v_diag_raw;    // N*B
  Vector a;             // N*B
  Vector b;             // N
  Nonlinearity nonlinearity = Nonlinearity::Tanh;

  Index hidden() const { return n_dim * block_size; }
};

struct PackedMasks {
  BoolMatrix u;      // block-lower triangle incl. block diagonal
  BoolMatrix v_off;  // strictly block-upper region
};

// Masks over the (N*B)xN packed matrix; disjoint, and together they cover it.
PackedMasks build_masks(Index n_dim, Index block_size);

struct Materialized {
  Matrix u;  // (N*B) x N
  Matrix v;  // N x (N*B)
};

// Dense U and V with softplus applied to the block diagonals.
Materialized materialize(const TriUnit& unit);

// Inverse of materialize: writes packed/v_diag_raw of `unit` from dense
// (U, V). Block-diagonal entries of U and V must be strictly positive.
void pack_parameters(const Matrix& u, const Matrix& v, TriUnit& unit);

// Intermediates of one unit evaluation, cached for gradient replay.
// Columns are samples throughout.
struct UnitTrace {
  Matrix x;      // N x M layer input
  Matrix z;      // NB x M pre-activation U x + a
  Matrix phi;    // NB x M
  Matrix dphi;   // NB x M
  Matrix ddphi;  // NB x M
  Matrix diag;   // N x M per-dimension diagonal terms sum_i u v phi'
};

// Batch forward pass; y and log_diag are resized to N x M. The diagonal sum
// is floored at 1e-300 before the log so a positive underflow cannot produce
// a NaN. Overflow shows up as non-finite outputs, which callers treat as a
// divergence signal. `trace` may be null.
void unit_forward(const TriUnit& unit, const Matrix& x, Matrix& y,
                  Matrix& log_diag, UnitTrace* trace);

struct UnitForwardResult {
  Vector y;
  Vector log_diag;
  UnitTrace trace;
};

UnitForwardResult unit_forward(const TriUnit& unit, const Vector& x);

// Stored float count of one unit: packed + v_diag_raw + a + b.
inline Index stored_float_count(Index n_dim, Index block_size) {
  return n_dim * block_size * n_dim + 2 * n_dim * block_size + n_dim;
}

}  // namespace triflow
