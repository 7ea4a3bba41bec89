#pragma once

#include "triflow/flow.hpp"

namespace triflow {

// Gradients with respect to the RAW (pre-softplus) parameters; shapes mirror
// the model layer by layer.
struct LayerGrads {
  Matrix d_packed;
  Vector d_v_diag_raw;
  Vector d_a;
  Vector d_b;
};

struct GradientSet {
  std::vector<LayerGrads> layers;
};

GradientSet zeros_like(const FlowModel& model);

// Reverse-mode gradient of the summed per-sample NLL through the cached
// trace. `y` holds the final outputs (columns = samples); for a batch, the
// result is the sum of per-sample gradients — divide by the column count for
// the mean. Throws on non-finite adjoints.
GradientSet nll_backward(const FlowModel& model, const ForwardTrace& trace,
                         const Matrix& y);
GradientSet nll_backward(const FlowModel& model, const ForwardTrace& trace,
                         const Vector& y);

// Perturbs every raw parameter by +-eps, recomputes the NLL at x and returns
// the worst relative error against nll_backward (absolute error below 1e-7
// magnitude).
double finite_diff_check(const FlowModel& model, const Vector& x, double eps);

struct L1Result {
  double penalty;
  GradientSet grads;
};

// penalty = eta * sum |theta_raw| over packed, v_diag_raw, a, b;
// subgradient eta * sign(theta_raw) with sign(0) = 0.
L1Result l1_subgradient(const FlowModel& model, double eta);

// acc += alpha * g
void axpy(double alpha, const GradientSet& g, GradientSet& acc);
void scale(GradientSet& g, double alpha);
bool all_finite(const GradientSet& g);
double max_abs(const GradientSet& g);

// Contiguous views of the raw parameter arrays, in a fixed layer order
// (packed, v_diag_raw, a, b per layer). GradientSet blocks walk in lockstep.
std::vector<std::pair<double*, Index>> parameter_blocks(FlowModel& model);
std::vector<std::pair<const double*, Index>> parameter_blocks(
    const FlowModel& model);
std::vector<std::pair<double*, Index>> gradient_blocks(GradientSet& g);
std::vector<std::pair<const double*, Index>> gradient_blocks(
    const GradientSet& g);
Index parameter_count(const FlowModel& model);

}  // namespace triflow
