#pragma once

#include <string>
#include <vector>

#include "triflow/invert.hpp"
#include "triflow/model_io.hpp"
#include "triflow/train.hpp"

namespace triflow {

// Exit taxonomy shared by every subcommand.
enum ExitCode : int {
  kOk = 0,
  kCheckFail = 1,
  kIo = 2,
  kConfig = 3,
  kFormat = 4,
};

enum class DataFormat { Csv, Idx, Cifar };
DataFormat parse_format(std::string_view name);

struct RunConfig {
  // data
  std::vector<std::string> data_paths;
  DataFormat format = DataFormat::Csv;
  bool csv_header = false;
  double val_frac = 0.1;
  double test_frac = 0.1;
  Index idx_take = -1;

  // architecture (ignored when resuming; must then match if explicitly set)
  Index block_size = 8;
  Index n_layers = 4;
  Nonlinearity nonlinearity = Nonlinearity::LogSym;
  bool flip = true;
  bool arch_set = false;

  // preprocessing
  double lambda = 1e-6;
  double augment_frac = 0.0;  // > 0 enables circular-shift augmentation

  // training
  TrainConfig train;
  std::string resume_path;

  // shared outputs / inputs
  std::string model_path;  // eval | sample | check | grid input
  std::string out_path;    // train: model file; sample | grid: CSV
  std::string split = "test";
  Index sample_count = 100;
  double inversion_tol = 1e-10;

  double grid_xmin = -4.0, grid_xmax = 4.0;
  double grid_ymin = -4.0, grid_ymax = 4.0;
  Index grid_resolution = 100;

  bool quiet = false;
};

int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_sample(const RunConfig& cfg);
int cmd_check(const RunConfig& cfg);
int cmd_grid(const RunConfig& cfg);

}  // namespace triflow
