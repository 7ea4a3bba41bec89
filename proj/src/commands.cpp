#include "triflow/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace triflow {

namespace {

// internal stream ids so augmentation, dequantization and check inputs never
// share per-record streams under one run seed
constexpr std::uint64_t kAugmentStream = 1001;
constexpr std::uint64_t kDequantStream = 1002;
constexpr std::uint64_t kCheckStream = 1003;

int fail(int code, const char* category, const std::string& msg) {
  std::cerr << "error[" << category << "]: " << msg << "\n";
  return code;
}

template <class F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const FormatError& e) {
    return fail(kFormat, "format", e.what());
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const std::exception& e) {
    return fail(kCheckFail, "check", e.what());
  }
}

Dataset load_data(const RunConfig& cfg) {
  if (cfg.data_paths.empty()) throw ConfigError("no --data path given");
  switch (cfg.format) {
    case DataFormat::Csv:
      return load_csv(cfg.data_paths.front(), cfg.csv_header);
    case DataFormat::Idx:
      return load_idx(cfg.data_paths.front(), cfg.idx_take);
    case DataFormat::Cifar:
      return load_cifar_bin(cfg.data_paths);
  }
  throw ConfigError("unknown data format");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

double mean_correction(const Dataset& ds, const SplitRange& r) {
  return ds.preprocess->correction.segment(r.begin, r.size()).mean();
}

// Evaluation printed by eval/train; bpd only exists for dequantized data.
void print_split_metrics(const char* name, const FlowModel& model,
                         const Dataset& ds, const SplitRange& r) {
  if (r.size() == 0) return;
  const EvalResult ev = evaluate(model, ds.rows(r));
  std::printf("split=%s n=%lld mean_nll=%.9f std_err=%.9f%s\n", name,
              static_cast<long long>(r.size()), ev.mean_nll, ev.std_err,
              ev.degenerate ? " degenerate=1" : "");
  if (ds.preprocess.has_value()) {
    std::printf("split=%s bpd=%.6f\n", name,
                bits_per_dim(ev.mean_nll, mean_correction(ds, r), ds.dim()));
  }
}

nlohmann::json split_json(const SplitRange& r) {
  return nlohmann::json{{"begin", r.begin}, {"end", r.end}};
}

bool header_has_image(const HeaderMap& h) { return h.count("lambda") != 0; }

}  // namespace

DataFormat parse_format(std::string_view name) {
  if (name == "csv") return DataFormat::Csv;
  if (name == "idx") return DataFormat::Idx;
  if (name == "cifar") return DataFormat::Cifar;
  throw ConfigError("unknown format '" + std::string(name) +
                    "' (expected csv|idx|cifar)");
}

int cmd_train(const RunConfig& cfg) {
  return guarded([&]() -> int {
    if (cfg.out_path.empty()) throw ConfigError("train needs --out");
    Dataset ds = load_data(cfg);
    assign_tail_split(ds, cfg.val_frac, cfg.test_frac);
    const bool image = ds.image_geom.has_value();

    if (cfg.augment_frac > 0.0) {
      if (!image) {
        throw ConfigError("--augment-shift needs an image data format");
      }
      ds.samples.middleRows(ds.splits.train.begin, ds.splits.train.size()) =
          augment_shift_rows(ds.rows(ds.splits.train), *ds.image_geom,
                             cfg.augment_frac,
                             mix_seed(cfg.train.seed, kAugmentStream));
    }
    if (image) {
      dequantize_logit_inplace(ds, cfg.lambda,
                               mix_seed(cfg.train.seed, kDequantStream));
    }

    FlowModel model;
    Normalizer norm;
    bool have_norm = false;
    if (!cfg.resume_path.empty()) {
      model = load_model(cfg.resume_path);
      if (model.n_dim() != ds.dim()) {
        throw ConfigError("resume model has n_dim=" +
                          std::to_string(model.n_dim()) + " but data has " +
                          std::to_string(ds.dim()) + " columns");
      }
      if (cfg.arch_set &&
          (model.layers.front().block_size != cfg.block_size ||
           model.n_layers() != cfg.n_layers ||
           model.layers.front().nonlinearity != cfg.nonlinearity)) {
        throw ConfigError(
            "explicit architecture flags disagree with the resumed model");
      }
    } else {
      norm = fit_normalizer(ds.rows(ds.splits.train));
      have_norm = true;
      apply_normalizer(norm, ds.samples);
      model = make_flow(ds.dim(), cfg.block_size, cfg.n_layers,
                        cfg.nonlinearity, cfg.flip, cfg.train.seed);
    }

    FitResult fr =
        fit(std::move(model), ds, cfg.train, cfg.quiet ? nullptr : &std::cerr);
    FlowModel trained = std::move(fr.model);

    // NLLs seen by the trainer live in whitened space; reporting adds the
    // whitening log|det| back so numbers match a later `eval` of the saved
    // self-contained model
    const double offset = have_norm ? -norm.sum_log_diag() : 0.0;

    const EvalResult val_ev = evaluate(trained, ds.rows(ds.splits.validation));
    EvalResult test_ev;
    const bool have_test = ds.splits.test.size() > 0;
    if (have_test) test_ev = evaluate(trained, ds.rows(ds.splits.test));

    FlowModel final_model = have_norm
                                ? absorb_normalizer(std::move(trained), norm)
                                : std::move(trained);

    HeaderMap meta;
    meta["seed"] = std::to_string(cfg.train.seed);
    meta["created_by"] = "triflow";
    if (image) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", cfg.lambda);
      meta["lambda"] = buf;
      meta["image_height"] = std::to_string(ds.image_geom->height);
      meta["image_width"] = std::to_string(ds.image_geom->width);
      meta["image_channels"] = std::to_string(ds.image_geom->channels);
    }
    save_model(cfg.out_path, final_model, meta);

    const std::string history_path = cfg.out_path + ".history.csv";
    {
      auto f = open_out(history_path);
      write_history_csv(f, fr.history, offset);
    }

    nlohmann::json j;
    j["seed"] = cfg.train.seed;
    j["splits"] = {{"train", split_json(ds.splits.train)},
                   {"validation", split_json(ds.splits.validation)},
                   {"test", split_json(ds.splits.test)}};
    j["config"] = {{"block_size", final_model.layers.front().block_size},
                   {"n_layers", final_model.n_layers()},
                   {"nonlinearity",
                    to_string(final_model.layers.front().nonlinearity)},
                   {"flip", cfg.flip},
                   {"lr0", cfg.train.lr0},
                   {"batch_size", cfg.train.batch_size},
                   {"l1_eta", cfg.train.l1_eta},
                   {"patience_epochs", cfg.train.patience_epochs},
                   {"lr_decay", cfg.train.lr_decay},
                   {"min_lr", cfg.train.min_lr},
                   {"max_epochs", cfg.train.max_epochs},
                   {"lambda", cfg.lambda},
                   {"augment_frac", cfg.augment_frac},
                   {"val_frac", cfg.val_frac},
                   {"test_frac", cfg.test_frac}};
    j["results"] = {{"best_epoch", fr.history.best_epoch},
                    {"best_val_nll", fr.history.best_val_nll + offset},
                    {"val_nll", val_ev.mean_nll + offset}};
    if (have_test) {
      j["results"]["test_nll"] = test_ev.mean_nll + offset;
      if (image) {
        j["results"]["test_bpd"] =
            bits_per_dim(test_ev.mean_nll + offset,
                         mean_correction(ds, ds.splits.test), ds.dim());
      }
    }
    {
      auto f = open_out(cfg.out_path + ".meta.json");
      f << j.dump(2) << "\n";
    }

    std::printf("best_epoch=%lld best_val_nll=%.9f\n",
                static_cast<long long>(fr.history.best_epoch),
                fr.history.best_val_nll + offset);
    if (have_test) {
      std::printf("split=test mean_nll=%.9f\n", test_ev.mean_nll + offset);
      if (image) {
        std::printf("split=test bpd=%.6f\n",
                    bits_per_dim(test_ev.mean_nll + offset,
                                 mean_correction(ds, ds.splits.test),
                                 ds.dim()));
      }
    }
    std::printf("model=%s\nhistory=%s\n", cfg.out_path.c_str(),
                history_path.c_str());
    return kOk;
  });
}

int cmd_eval(const RunConfig& cfg) {
  return guarded([&]() -> int {
    if (cfg.model_path.empty()) throw ConfigError("eval needs --model");
    HeaderMap header;
    const FlowModel model = load_model(cfg.model_path, &header);
    Dataset ds = load_data(cfg);
    assign_tail_split(ds, cfg.val_frac, cfg.test_frac);
    if (ds.dim() != model.n_dim()) {
      throw ConfigError("data has " + std::to_string(ds.dim()) +
                        " columns but the model expects " +
                        std::to_string(model.n_dim()));
    }
    if (ds.image_geom.has_value()) {
      double lambda = cfg.lambda;
      if (auto it = header.find("lambda"); it != header.end()) {
        lambda = std::stod(it->second);
      }
      dequantize_logit_inplace(ds, lambda,
                               mix_seed(cfg.train.seed, kDequantStream));
    }

    print_split_metrics("train", model, ds, ds.splits.train);
    if (cfg.split == "validation") {
      print_split_metrics("validation", model, ds, ds.splits.validation);
    } else if (cfg.split == "test") {
      print_split_metrics("test", model, ds, ds.splits.test);
    } else if (cfg.split == "all") {
      print_split_metrics("validation", model, ds, ds.splits.validation);
      print_split_metrics("test", model, ds, ds.splits.test);
    } else if (cfg.split != "train") {
      throw ConfigError("unknown --split '" + cfg.split + "'");
    }
    return kOk;
  });
}

int cmd_sample(const RunConfig& cfg) {
  return guarded([&]() -> int {
    if (cfg.model_path.empty()) throw ConfigError("sample needs --model");
    if (cfg.out_path.empty()) throw ConfigError("sample needs --out");
    HeaderMap header;
    const FlowModel model = load_model(cfg.model_path, &header);
    const Index n = model.n_dim();

    const SampleResult res =
        sample(model, cfg.sample_count, cfg.train.seed, cfg.inversion_tol);

    auto write_header = [n](std::ofstream& f) {
      for (Index c = 0; c < n; ++c) f << (c > 0 ? ",x" : "x") << c;
      f << "\n";
    };

    {
      auto f = open_out(cfg.out_path);
      write_header(f);
      char buf[32];
      for (Index r = 0; r < res.samples.rows(); ++r) {
        for (Index c = 0; c < n; ++c) {
          std::snprintf(buf, sizeof buf, "%.17g", res.samples(r, c));
          if (c > 0) f << ',';
          f << buf;
        }
        f << "\n";
      }
    }

    if (header_has_image(header)) {
      // invert the logit preprocessing back to pixel space
      const double lambda = std::stod(header.at("lambda"));
      auto f = open_out(cfg.out_path + ".pixels.csv");
      write_header(f);
      for (Index r = 0; r < res.samples.rows(); ++r) {
        for (Index c = 0; c < n; ++c) {
          const double t = 1.0 / (1.0 + std::exp(-res.samples(r, c)));
          const double s = (t - lambda) / (1.0 - 2.0 * lambda);
          const double pixel =
              std::clamp(std::floor(s * 256.0), 0.0, 255.0);
          if (c > 0) f << ',';
          f << pixel;
        }
        f << "\n";
      }
    }

    if (res.rejected > 0) {
      std::printf("rejected=%lld\n", static_cast<long long>(res.rejected));
    }
    std::printf("samples=%lld out=%s\n",
                static_cast<long long>(res.samples.rows()),
                cfg.out_path.c_str());
    return kOk;
  });
}

int cmd_check(const RunConfig& cfg) {
  return guarded([&]() -> int {
    if (cfg.model_path.empty()) throw ConfigError("check needs --model");
    const FlowModel model = load_model(cfg.model_path);
    const Index n = model.n_dim();
    auto rng = make_rng(cfg.train.seed, kCheckStream);
    std::normal_distribution<double> gauss(0.0, 0.5);
    Vector x(n);
    for (Index i = 0; i < n; ++i) x(i) = gauss(rng);

    bool all_pass = true;

    // 1. gradient vs central differences (subset above the budget)
    {
      const Index total = parameter_count(model);
      const Index budget = 4000;
      double max_err = 0.0;
      Index checked = 0;
      if (total <= budget) {
        max_err = finite_diff_check(model, x, 1e-5);
        checked = total;
      } else {
        FlowModel work = model;
        ForwardTrace trace;
        Matrix y;
        Vector logdet;
        flow_forward(work, Matrix(x), y, logdet, &trace);
        const GradientSet g = nll_backward(work, trace, y);
        auto params = parameter_blocks(work);
        auto grads = gradient_blocks(g);
        const Index stride = (total + budget - 1) / budget;
        constexpr double eps = 1e-5;
        Index flat = 0;
        for (std::size_t blk = 0; blk < params.size(); ++blk) {
          double* p = params[blk].first;
          const double* gp = grads[blk].first;
          for (Index i = 0; i < params[blk].second; ++i, ++flat) {
            if (flat % stride != 0) continue;
            const double saved = p[i];
            p[i] = saved + eps;
            const double up = flow_nll(work, Matrix(x))(0);
            p[i] = saved - eps;
            const double down = flow_nll(work, Matrix(x))(0);
            p[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double denom = std::max(std::abs(fd), std::abs(gp[i]));
            max_err = std::max(max_err, denom < 1e-7
                                            ? std::abs(gp[i] - fd)
                                            : std::abs(gp[i] - fd) / denom);
            ++checked;
          }
        }
      }
      const bool pass = max_err < 1e-4;
      all_pass = all_pass && pass;
      std::printf("gradient-check: %s max_err=%.3e params=%lld/%lld%s\n",
                  pass ? "PASS" : "FAIL", max_err,
                  static_cast<long long>(checked),
                  static_cast<long long>(total),
                  checked < total ? " (partial)" : "");
    }

    // 2. log-determinant: dense Jacobian for small n, otherwise per-layer
    // diagonal terms against scalar central differences
    {
      double max_err = 0.0;
      bool partial = false;
      constexpr double eps = 1e-5;
      if (n <= 8) {
        Matrix jac(n, n);
        Vector ld;
        Matrix yp, ym;
        for (Index j = 0; j < n; ++j) {
          Vector xp = x, xm = x;
          xp(j) += eps;
          xm(j) -= eps;
          flow_forward(model, Matrix(xp), yp, ld, nullptr);
          flow_forward(model, Matrix(xm), ym, ld, nullptr);
          jac.col(j) = (yp.col(0) - ym.col(0)) / (2.0 * eps);
        }
        Vector logdet;
        Matrix y;
        flow_forward(model, Matrix(x), y, logdet, nullptr);
        const double dense =
            Eigen::PartialPivLU<Matrix>(jac).matrixLU().diagonal().array().abs().log().sum();
        max_err = std::abs(logdet(0) - dense) /
                  std::max(1.0, std::abs(dense));
      } else {
        partial = true;
        ForwardTrace trace;
        Matrix y;
        Vector logdet;
        flow_forward(model, Matrix(x), y, logdet, &trace);
        const Index probes = std::min<Index>(n, 32);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
          const Matrix& input = trace.layers[l].x;
          for (Index k = 0; k < probes; ++k) {
            const Index coord = (k * n) / probes;
            Matrix xp = input, xm = input;
            xp(coord, 0) += eps;
            xm(coord, 0) -= eps;
            Matrix ldp, ldm, outp, outm;
            unit_forward(model.layers[l], xp, outp, ldp, nullptr);
            unit_forward(model.layers[l], xm, outm, ldm, nullptr);
            const double fd =
                (outp(coord, 0) - outm(coord, 0)) / (2.0 * eps);
            const double analytic = trace.layers[l].diag(coord, 0);
            max_err = std::max(
                max_err, std::abs(fd - analytic) /
                             std::max(1.0, std::abs(analytic)));
          }
        }
      }
      const bool pass = max_err < 1e-4;
      all_pass = all_pass && pass;
      std::printf("logdet-check: %s max_err=%.3e%s\n", pass ? "PASS" : "FAIL",
                  max_err, partial ? " (partial: per-layer diagonals)" : "");
    }

    // 3. inversion round trip
    {
      const Index trips = n > 64 ? 5 : 100;
      double max_err = 0.0;
      auto rt_rng = make_rng(cfg.train.seed, kCheckStream + 1);
      std::normal_distribution<double> g01(0.0, 0.5);
      for (Index k = 0; k < trips; ++k) {
        Vector x0(n);
        for (Index i = 0; i < n; ++i) x0(i) = g01(rt_rng);
        Matrix y;
        Vector ld;
        flow_forward(model, Matrix(x0), y, ld, nullptr);
        const Vector back = invert_flow(model, y.col(0), cfg.inversion_tol);
        max_err = std::max(max_err, (back - x0).cwiseAbs().maxCoeff());
      }
      const bool pass = max_err < 1e-6;
      all_pass = all_pass && pass;
      std::printf("inversion-check: %s max_err=%.3e trips=%lld\n",
                  pass ? "PASS" : "FAIL", max_err,
                  static_cast<long long>(trips));
    }

    return all_pass ? kOk : kCheckFail;
  });
}

int cmd_grid(const RunConfig& cfg) {
  return guarded([&]() -> int {
    if (cfg.model_path.empty()) throw ConfigError("grid needs --model");
    if (cfg.out_path.empty()) throw ConfigError("grid needs --out");
    if (cfg.grid_resolution < 1) {
      throw ConfigError("grid resolution must be >= 1");
    }
    const FlowModel model = load_model(cfg.model_path);
    const Index n = model.n_dim();
    if (n > 2) {
      throw ConfigError("grid supports n_dim <= 2; evaluate marginal slices "
                        "of higher-dimensional models instead");
    }

    const Index res = cfg.grid_resolution;
    auto center = [res](double lo, double hi, Index i) {
      return lo + (double(i) + 0.5) * (hi - lo) / double(res);
    };

    auto f = open_out(cfg.out_path);
    char buf[96];
    if (n == 1) {
      f << "x,log_density\n";
      Matrix pts(1, res);
      for (Index i = 0; i < res; ++i) {
        pts(0, i) = center(cfg.grid_xmin, cfg.grid_xmax, i);
      }
      const Vector nlls = flow_nll(model, pts);
      for (Index i = 0; i < res; ++i) {
        std::snprintf(buf, sizeof buf, "%.12g,%.12g\n", pts(0, i), -nlls(i));
        f << buf;
      }
    } else {
      f << "x,y,log_density\n";
      Matrix pts(2, res);
      for (Index iy = 0; iy < res; ++iy) {
        const double ycoord = center(cfg.grid_ymin, cfg.grid_ymax, iy);
        for (Index ix = 0; ix < res; ++ix) {
          pts(0, ix) = center(cfg.grid_xmin, cfg.grid_xmax, ix);
          pts(1, ix) = ycoord;
        }
        const Vector nlls = flow_nll(model, pts);
        for (Index ix = 0; ix < res; ++ix) {
          std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g\n", pts(0, ix),
                        ycoord, -nlls(ix));
          f << buf;
        }
      }
    }
    std::printf("grid=%s points=%lld\n", cfg.out_path.c_str(),
                static_cast<long long>(n == 1 ? res : res * res));
    return kOk;
  });
}

}  // namespace triflow
