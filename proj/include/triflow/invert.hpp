#pragma once

#include "triflow/flow.hpp"

namespace triflow {

struct InvertStats {
  Index scalar_solves = 0;
  Index max_bisect_iterations = 0;  // worst single solve, after bracketing
};

// Solves unit(x) = y coordinate by coordinate: x_1 from y_1, then x_n given
// x_{<n} by bisection on the strictly increasing scalar map t -> y_n(x_{<n}, t).
// Throws NotInvertible when bracket expansion exceeds its bound (a Tanh
// target outside the achievable range) and ToleranceNotReached when the
// bracket collapses to float resolution with the residual still above tol.
Vector invert_unit(const TriUnit& unit, const Vector& y, double tol = 1e-10,
                   InvertStats* stats = nullptr);

// Undoes flips and units in reverse layer order. Errors from invert_unit are
// rethrown tagged with the layer index.
Vector invert_flow(const FlowModel& model, const Vector& y, double tol = 1e-10,
                   InvertStats* stats = nullptr);

struct SampleResult {
  Matrix samples;   // count x N, one draw per row
  Index rejected;   // non-invertible draws redrawn (Tanh models only)
};

// Draws y ~ N(0, I) on per-draw generator streams derived from (seed, draw
// index) and pulls each draw back through invert_flow. Tanh draws outside the
// achievable range are rejected and redrawn; a rejection rate above 50% over
// a 64-attempt window aborts with a diagnostic.
SampleResult sample(const FlowModel& model, Index count, std::uint64_t seed,
                    double tol = 1e-10);

}  // namespace triflow
