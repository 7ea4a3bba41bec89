#pragma once

#include <iosfwd>
#include <limits>

#include "triflow/data.hpp"
#include "triflow/grad.hpp"

namespace triflow {

struct TrainConfig {
  double lr0 = 1e-4;
  Index batch_size = 64;
  double l1_eta = 0.0;
  Index patience_epochs = 10;
  double lr_decay = 0.1;
  double min_lr = 1e-7;
  Index max_epochs = 100;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // fixed-order batch reduction so runs are bit-reproducible under a seed
  bool deterministic_reduction = true;
};

// Moment accumulators mirror the gradient shapes.
struct AdamState {
  GradientSet m;
  GradientSet v;
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(const FlowModel& model, const TrainConfig& cfg);

// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) with bias correction.
void adam_step(FlowModel& model, AdamState& state, const GradientSet& grads,
               double lr);

struct EpochStats {
  Index epoch;
  double train_nll;
  double val_nll;
  double lr;
  double seconds;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  Index best_epoch = -1;
  double best_val_nll = std::numeric_limits<double>::infinity();
  // train-split NLL of the returned checkpoint, evaluated with frozen
  // parameters (the per-epoch train_nll column averages a moving model)
  double best_train_nll = std::numeric_limits<double>::infinity();
};

struct FitResult {
  FlowModel model;
  TrainHistory history;
};

// Adam over shuffled mini-batches of mean(NLL) + eta * L1. After
// patience_epochs epochs without validation improvement the lr decays by
// lr_decay and the best checkpoint is restored; stops when lr < min_lr or
// max_epochs. A divergent epoch (non-finite loss or gradients) restores the
// best checkpoint and decays immediately; three in a row abort.
FitResult fit(FlowModel model, const Dataset& data, const TrainConfig& cfg,
              std::ostream* log = nullptr);

struct EvalResult {
  double mean_nll = 0.0;
  double std_err = 0.0;
  bool degenerate = false;  // single-sample split, std_err reported as 0
};

// Streaming mean and standard error of the per-sample NLL over row-samples.
EvalResult evaluate(const FlowModel& model,
                    const Eigen::Ref<const Matrix>& samples_rows);

// epoch,train_nll,val_nll,lr,seconds; nll_offset is added to both NLL columns
// (used to report original-space values after whitening).
void write_history_csv(std::ostream& out, const TrainHistory& history,
                       double nll_offset = 0.0);

}  // namespace triflow
