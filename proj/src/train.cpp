#include "triflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace triflow {

AdamState make_adam_state(const FlowModel& model, const TrainConfig& cfg) {
  AdamState st;
  st.m = zeros_like(model);
  st.v = zeros_like(model);
  st.t = 0;
  st.beta1 = cfg.adam_beta1;
  st.beta2 = cfg.adam_beta2;
  st.eps = cfg.adam_eps;
  return st;
}

void adam_step(FlowModel& model, AdamState& st, const GradientSet& grads,
               double lr) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  auto params = parameter_blocks(model);
  auto g = gradient_blocks(grads);
  auto m = gradient_blocks(st.m);
  auto v = gradient_blocks(st.v);
  for (std::size_t blk = 0; blk < params.size(); ++blk) {
    const Index n = params[blk].second;
    Eigen::Map<Eigen::ArrayXd> p(params[blk].first, n);
    Eigen::Map<const Eigen::ArrayXd> gb(g[blk].first, n);
    Eigen::Map<Eigen::ArrayXd> mb(m[blk].first, n);
    Eigen::Map<Eigen::ArrayXd> vb(v[blk].first, n);
    mb = st.beta1 * mb + (1.0 - st.beta1) * gb;
    vb = st.beta2 * vb + (1.0 - st.beta2) * gb.square();
    p -= lr * (mb / bc1) / ((vb / bc2).sqrt() + st.eps);
  }
}

namespace {

void check_config(const TrainConfig& cfg) {
  if (!(cfg.lr0 > cfg.min_lr && cfg.min_lr > 0)) {
    throw ConfigError("fit: need lr0 > min_lr > 0");
  }
  if (!(cfg.lr_decay > 0 && cfg.lr_decay < 1)) {
    throw ConfigError("fit: need 0 < lr_decay < 1");
  }
  if (cfg.batch_size < 1) throw ConfigError("fit: batch_size must be >= 1");
  if (cfg.patience_epochs < 1) throw ConfigError("fit: patience must be >= 1");
}

}  // namespace

FitResult fit(FlowModel model, const Dataset& data, const TrainConfig& cfg,
              std::ostream* log) {
  check_config(cfg);
  const auto train_rows = data.rows(data.splits.train);
  const auto val_rows = data.rows(data.splits.validation);
  if (train_rows.rows() == 0 || val_rows.rows() == 0) {
    throw ConfigError("fit: train and validation splits must be nonempty");
  }
  if (data.dim() != model.n_dim()) {
    throw ConfigError("fit: data dimension does not match the model");
  }

  const Index n = data.dim();
  const Index m_train = train_rows.rows();

  double lr = cfg.lr0;
  FlowModel best = model;
  AdamState state = make_adam_state(model, cfg);
  TrainHistory hist;
  Index since_best = 0;
  int divergence_streak = 0;

  std::vector<Index> order(static_cast<std::size_t>(m_train));
  std::iota(order.begin(), order.end(), Index(0));
  Matrix xbuf;
  ForwardTrace trace;
  Matrix y;
  Vector logdet;

  for (Index epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // per-epoch stream so the shuffle sequence is reproducible
    auto rng = make_rng(cfg.seed, 0x100000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double nll_sum = 0.0;
    Index nll_count = 0;
    bool diverged = false;

    for (Index start = 0; start < m_train; start += cfg.batch_size) {
      const Index count = std::min(cfg.batch_size, m_train - start);
      xbuf.resize(n, count);
      for (Index j = 0; j < count; ++j) {
        xbuf.col(j) = train_rows.row(order[static_cast<std::size_t>(start + j)])
                          .transpose();
      }
      flow_forward(model, xbuf, y, logdet, &trace);
      const Vector batch_nll = nll(y, logdet);
      const double mean_nll = batch_nll.mean();
      if (!std::isfinite(mean_nll)) {
        diverged = true;
        break;
      }
      GradientSet grads;
      try {
        grads = nll_backward(model, trace, y);
      } catch (const ToleranceNotReached&) {
        diverged = true;
        break;
      }
      scale(grads, 1.0 / double(count));
      if (cfg.l1_eta > 0.0) {
        const L1Result l1 = l1_subgradient(model, cfg.l1_eta);
        axpy(1.0, l1.grads, grads);
      }
      if (!all_finite(grads)) {
        diverged = true;
        break;
      }
      adam_step(model, state, grads, lr);
      nll_sum += batch_nll.sum();
      nll_count += count;
    }

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();

    if (diverged) {
      ++divergence_streak;
      if (log != nullptr) {
        *log << "epoch " << epoch << ": diverged (non-finite loss), restoring "
             << "best checkpoint and decaying lr\n";
      }
      if (divergence_streak >= 3) {
        throw ToleranceNotReached(
            "fit: aborted after 3 consecutive divergent epochs");
      }
      model = best;
      state = make_adam_state(model, cfg);
      lr *= cfg.lr_decay;
      hist.epochs.push_back({epoch, std::nan(""), std::nan(""), lr, seconds});
      if (lr < cfg.min_lr) break;
      continue;
    }
    divergence_streak = 0;

    const double train_nll = nll_sum / double(nll_count);
    const double val_nll = evaluate(model, val_rows).mean_nll;
    hist.epochs.push_back({epoch, train_nll, val_nll, lr, seconds});
    if (log != nullptr) {
      *log << "epoch " << epoch << ": train_nll=" << train_nll
           << " val_nll=" << val_nll << " lr=" << lr << "\n";
    }

    if (val_nll < hist.best_val_nll) {
      hist.best_val_nll = val_nll;
      hist.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else {
      ++since_best;
    }

    if (since_best >= cfg.patience_epochs) {
      lr *= cfg.lr_decay;
      model = best;
      state = make_adam_state(model, cfg);
      since_best = 0;
      if (log != nullptr) {
        *log << "plateau: restored best (epoch " << hist.best_epoch
             << "), lr -> " << lr << "\n";
      }
      if (lr < cfg.min_lr) break;
    }
  }

  hist.best_train_nll = evaluate(best, train_rows).mean_nll;
  return {std::move(best), std::move(hist)};
}

EvalResult evaluate(const FlowModel& model,
                    const Eigen::Ref<const Matrix>& samples_rows) {
  const Index m = samples_rows.rows();
  if (m == 0) throw ConfigError("evaluate: empty split");
  const Index n = samples_rows.cols();
  constexpr Index kChunk = 256;

  double sum = 0.0;
  double sumsq = 0.0;
  Matrix xbuf;
  for (Index start = 0; start < m; start += kChunk) {
    const Index count = std::min(kChunk, m - start);
    xbuf = samples_rows.middleRows(start, count).transpose();
    const Vector nlls = flow_nll(model, xbuf);
    sum += nlls.sum();
    sumsq += nlls.squaredNorm();
  }

  EvalResult r;
  r.mean_nll = sum / double(m);
  if (m < 2) {
    r.std_err = 0.0;
    r.degenerate = true;
  } else {
    const double var = std::max(0.0, (sumsq - sum * sum / double(m)) / double(m - 1));
    r.std_err = std::sqrt(var / double(m));
  }
  return r;
}

void write_history_csv(std::ostream& out, const TrainHistory& history,
                       double nll_offset) {
  out << "epoch,train_nll,val_nll,lr,seconds\n";
  char buf[160];
  for (const EpochStats& e : history.epochs) {
    std::snprintf(buf, sizeof buf, "%lld,%.9f,%.9f,%.3e,%.3f\n",
                  static_cast<long long>(e.epoch), e.train_nll + nll_offset,
                  e.val_nll + nll_offset, e.lr, e.seconds);
    out << buf;
  }
}

}  // namespace triflow
