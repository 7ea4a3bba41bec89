#include <string>

#include <CLI11.hpp>

#include "triflow/commands.hpp"

namespace {

using triflow::RunConfig;

void add_data_flags(CLI::App* cmd, RunConfig& cfg, std::string& format) {
  cmd->add_option("--data", cfg.data_paths,
                  "input data file(s); cifar accepts several batches")
      ->required();
  cmd->add_option("--format", format, "csv|idx|cifar")
      ->check(CLI::IsMember({"csv", "idx", "cifar"}));
  cmd->add_flag("--header", cfg.csv_header, "skip one CSV header line");
  cmd->add_option("--take", cfg.idx_take, "keep only the first K IDX images");
  cmd->add_option("--val-frac", cfg.val_frac, "validation tail fraction");
  cmd->add_option("--test-frac", cfg.test_frac, "test tail fraction");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "triflow — density estimation with monotonic triangular network flows"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string format = "csv";
  std::string nonlinearity = "log";
  std::string flip = "on";

  auto* train = app.add_subcommand("train", "fit a model and save it");
  add_data_flags(train, cfg, format);
  auto* bs = train->add_option("--block-size", cfg.block_size, "unit order B");
  auto* nl = train->add_option("--layers", cfg.n_layers, "stacked units L");
  auto* nk = train->add_option("--nonlinearity", nonlinearity, "tanh|log")
                 ->check(CLI::IsMember({"tanh", "log"}));
  auto* fl = train->add_option("--flip", flip, "on|off: reverse order "
                                               "after each unit")
                 ->check(CLI::IsMember({"on", "off"}));
  train->add_option("--lr", cfg.train.lr0, "initial Adam step size");
  train->add_option("--batch", cfg.train.batch_size, "mini-batch size");
  train->add_option("--l1", cfg.train.l1_eta, "L1 weight eta");
  train->add_option("--patience", cfg.train.patience_epochs,
                    "epochs without validation gain before lr decay");
  train->add_option("--lr-decay", cfg.train.lr_decay, "lr decay factor");
  train->add_option("--min-lr", cfg.train.min_lr, "stop once lr drops below");
  train->add_option("--max-epochs", cfg.train.max_epochs, "epoch budget");
  train->add_option("--seed", cfg.train.seed, "run seed");
  train->add_option("--lambda", cfg.lambda, "logit preprocessing lambda");
  train->add_option("--augment-shift", cfg.augment_frac,
                    "circular-shift augmentation fraction (0 disables)");
  train->add_option("--resume", cfg.resume_path, "continue from a model file");
  train->add_option("--out", cfg.out_path, "output model path")->required();
  train->add_flag("--quiet", cfg.quiet, "suppress per-epoch progress");

  auto* eval = app.add_subcommand("eval", "report NLL (and bpd for images)");
  add_data_flags(eval, cfg, format);
  eval->add_option("--model", cfg.model_path, "model file")->required();
  eval->add_option("--split", cfg.split, "train|validation|test|all");
  eval->add_option("--seed", cfg.train.seed,
                   "dequantization seed (match training for exact replay)");
  eval->add_option("--lambda", cfg.lambda,
                   "logit lambda override when the model header lacks one");

  auto* smp = app.add_subcommand("sample", "draw samples from a model");
  smp->add_option("--model", cfg.model_path, "model file")->required();
  smp->add_option("--count", cfg.sample_count, "number of draws")->required();
  smp->add_option("--seed", cfg.train.seed, "sampling seed");
  smp->add_option("--tol", cfg.inversion_tol, "per-coordinate inversion tol");
  smp->add_option("--out", cfg.out_path, "output CSV path")->required();

  auto* chk = app.add_subcommand("check", "verify a model file numerically");
  chk->add_option("--model", cfg.model_path, "model file")->required();
  chk->add_option("--seed", cfg.train.seed, "probe seed");
  chk->add_option("--tol", cfg.inversion_tol, "per-coordinate inversion tol");

  auto* grd = app.add_subcommand("grid", "emit a log-density lattice (1D/2D)");
  grd->add_option("--model", cfg.model_path, "model file")->required();
  grd->add_option("--xmin", cfg.grid_xmin, "x range lower edge");
  grd->add_option("--xmax", cfg.grid_xmax, "x range upper edge");
  grd->add_option("--ymin", cfg.grid_ymin, "y range lower edge");
  grd->add_option("--ymax", cfg.grid_ymax, "y range upper edge");
  grd->add_option("--resolution", cfg.grid_resolution, "cells per axis");
  grd->add_option("--out", cfg.out_path, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return triflow::kConfig;
  }

  try {
    cfg.format = triflow::parse_format(format);
    cfg.nonlinearity = triflow::parse_nonlinearity(nonlinearity);
    cfg.flip = flip == "on";
    cfg.arch_set = bs->count() > 0 || nl->count() > 0 || nk->count() > 0 ||
                   fl->count() > 0;
  } catch (const triflow::ConfigError& e) {
    std::fprintf(stderr, "error[config]: %s\n", e.what());
    return triflow::kConfig;
  }

  if (*train) return triflow::cmd_train(cfg);
  if (*eval) return triflow::cmd_eval(cfg);
  if (*smp) return triflow::cmd_sample(cfg);
  if (*chk) return triflow::cmd_check(cfg);
  if (*grd) return triflow::cmd_grid(cfg);
  return triflow::kConfig;
}
