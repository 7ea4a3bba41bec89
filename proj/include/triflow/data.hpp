#pragma once

#include <optional>
#include <string>
#include <vector>

#include "triflow/flow.hpp"

namespace triflow {

struct SplitRange {
  Index begin = 0;
  Index end = 0;
  Index size() const { return end - begin; }
};

struct DataSplits {
  SplitRange train;
  SplitRange validation;
  SplitRange test;
};

struct ImageGeometry {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  Index pixels() const { return height * width * channels; }
};

struct PreprocessMeta {
  double lambda = 0.0;
  Vector correction;  // per-sample log|det| of the pixel -> z map
};

struct Dataset {
  Matrix samples;  // one sample per row
  DataSplits splits;
  std::optional<ImageGeometry> image_geom;
  std::optional<PreprocessMeta> preprocess;

  Index count() const { return samples.rows(); }
  Index dim() const { return samples.cols(); }
  Eigen::Block<const Matrix> rows(const SplitRange& r) const {
    return samples.middleRows(r.begin, r.size());
  }
};

// Deterministic tail split: validation and test take the trailing fractions,
// training keeps the head.
void assign_tail_split(Dataset& ds, double val_frac, double test_frac);

// CSV, one sample per row, no header unless skip_header.
Dataset load_csv(const std::string& path, bool skip_header = false);

// IDX image file (big-endian, magic 0x00000803); rows flattened to [0,255].
// n_take < 0 keeps everything.
Dataset load_idx(const std::string& images_path, Index n_take = -1);

// CIFAR-10 binary batches: 3073-byte records, leading label byte discarded.
Dataset load_cifar_bin(const std::vector<std::string>& paths);

// pixel -> z = logit(lambda + (1-2*lambda)*(pixel+u)/256) with u ~ U(0,1).
// Returns z and the per-sample correction
//   sum_n [ln(1-2l) - ln t_n - ln(1-t_n) - ln 256],
// the exact log|det| of the full pixel -> z map.
std::pair<Vector, double> dequantize_logit(const Vector& pixels, double lambda,
                                           std::mt19937_64& rng);

// Applies dequantize_logit to every row on per-record streams derived from
// (seed, row); fills ds.preprocess.
void dequantize_logit_inplace(Dataset& ds, double lambda, std::uint64_t seed);

// (mean_nll_z - mean_correction) / (n_dim * ln 2)
double bits_per_dim(double mean_nll_z, double mean_correction, Index n_dim);

// Whitening map x -> Gamma (x - m) with Gamma = L^-1 from the Cholesky
// factorization C + ridge I = L L^T of the sample covariance.
struct Normalizer {
  Vector m;
  Matrix gamma;  // lower triangular, positive diagonal

  double sum_log_diag() const { return gamma.diagonal().array().log().sum(); }
};

Normalizer fit_normalizer(const Matrix& samples_rows);

// In-place x <- Gamma (x - m) for every row.
void apply_normalizer(const Normalizer& norm, Matrix& samples_rows);

// Folds the whitening map into the first unit: U <- U Gamma,
// a <- a - U Gamma m. The packed layout stays valid because U Gamma is still
// block-lower-triangular and the new block diagonals u * Gamma_nn stay
// positive.
FlowModel absorb_normalizer(FlowModel model, const Normalizer& norm);

// Circular (dx, dy) shift per image, both drawn uniformly from
// [-k, k] with k = floor(max_frac * side), independent per record.
Matrix augment_shift_rows(const Matrix& rows, const ImageGeometry& geom,
                          double max_frac, std::uint64_t seed);
Dataset augment_shift(const Dataset& images, double max_frac,
                      std::uint64_t seed);

}  // namespace triflow
