#include "triflow/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <vector>

namespace triflow {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace

void assign_tail_split(Dataset& ds, double val_frac, double test_frac) {
  if (val_frac < 0 || test_frac < 0 || val_frac + test_frac >= 1.0) {
    throw ConfigError("split fractions must be nonnegative and sum below 1");
  }
  const Index m = ds.count();
  const Index n_test = static_cast<Index>(std::floor(test_frac * double(m)));
  const Index n_val = static_cast<Index>(std::floor(val_frac * double(m)));
  const Index n_train = m - n_val - n_test;
  ds.splits.train = {0, n_train};
  ds.splits.validation = {n_train, n_train + n_val};
  ds.splits.test = {n_train + n_val, m};
}

Dataset load_csv(const std::string& path, bool skip_header) {
  const std::string text = read_file(path);
  std::vector<double> values;
  Index cols = -1;
  Index rows = 0;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    ++line_no;
    std::size_t begin = pos;
    std::size_t len = eol - pos;
    if (len > 0 && text[begin + len - 1] == '\r') --len;
    pos = eol + 1;
    if (skip_header && line_no == 1) continue;
    if (len == 0) continue;

    Index row_cols = 0;
    std::size_t cell = begin;
    const std::size_t end = begin + len;
    while (cell <= end) {
      std::size_t comma = text.find(',', cell);
      if (comma == std::string::npos || comma >= end) comma = end;
      double v = 0;
      const char* first = text.data() + cell;
      const char* last = text.data() + comma;
      while (first < last && (*first == ' ' || *first == '\t')) ++first;
      auto [ptr, ec] = std::from_chars(first, last, v);
      while (ptr < last && (*ptr == ' ' || *ptr == '\t')) ++ptr;
      if (ec != std::errc() || ptr != last) {
        throw FormatError("'" + path + "': non-numeric cell at line " +
                          std::to_string(line_no) + ", byte offset " +
                          std::to_string(cell));
      }
      values.push_back(v);
      ++row_cols;
      cell = comma + 1;
      if (comma == end) break;
    }
    if (cols < 0) {
      cols = row_cols;
    } else if (row_cols != cols) {
      throw FormatError("'" + path + "': line " + std::to_string(line_no) +
                        " has " + std::to_string(row_cols) +
                        " cells, expected " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw FormatError("'" + path + "': no data rows");

  Dataset ds;
  ds.samples.resize(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      ds.samples(r, c) = values[static_cast<std::size_t>(r * cols + c)];
    }
  }
  ds.splits.train = {0, rows};
  return ds;
}

Dataset load_idx(const std::string& path, Index n_take) {
  const std::string raw = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 16) {
    throw FormatError("'" + path + "': truncated IDX header (" +
                      std::to_string(raw.size()) + " bytes, need 16)");
  }
  const std::uint32_t magic = read_be32(p);
  if (magic != 0x00000803u) {
    std::ostringstream ss;
    ss << "'" << path << "': bad IDX magic, expected 0x00000803, found 0x"
       << std::hex << magic;
    throw FormatError(ss.str());
  }
  const Index count = read_be32(p + 4);
  const Index height = read_be32(p + 8);
  const Index width = read_be32(p + 12);
  const Index take = (n_take < 0 || n_take > count) ? count : n_take;
  const std::size_t need = 16 + std::size_t(count) * height * width;
  if (raw.size() < need) {
    throw FormatError("'" + path + "': truncated IDX payload, have " +
                      std::to_string(raw.size()) + " bytes, need " +
                      std::to_string(need));
  }

  Dataset ds;
  ds.samples.resize(take, height * width);
  const unsigned char* pix = p + 16;
  for (Index r = 0; r < take; ++r) {
    for (Index c = 0; c < height * width; ++c) {
      ds.samples(r, c) = double(pix[r * height * width + c]);
    }
  }
  ds.image_geom = ImageGeometry{height, width, 1};
  ds.splits.train = {0, take};
  return ds;
}

Dataset load_cifar_bin(const std::vector<std::string>& paths) {
  constexpr Index kRecord = 3073;
  constexpr Index kPixels = 3072;
  std::vector<std::string> blobs;
  Index total = 0;
  for (const auto& path : paths) {
    blobs.push_back(read_file(path));
    if (blobs.back().size() % kRecord != 0) {
      throw FormatError("'" + path + "': size " +
                        std::to_string(blobs.back().size()) +
                        " is not a multiple of the 3073-byte record");
    }
    total += static_cast<Index>(blobs.back().size() / kRecord);
  }
  if (total == 0) throw FormatError("no CIFAR records found");

  Dataset ds;
  ds.samples.resize(total, kPixels);
  Index row = 0;
  for (const auto& blob : blobs) {
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    const Index records = static_cast<Index>(blob.size() / kRecord);
    for (Index r = 0; r < records; ++r, ++row) {
      const unsigned char* rec = p + r * kRecord + 1;  // skip label byte
      for (Index c = 0; c < kPixels; ++c) ds.samples(row, c) = double(rec[c]);
    }
  }
  ds.image_geom = ImageGeometry{32, 32, 3};
  ds.splits.train = {0, total};
  return ds;
}

std::pair<Vector, double> dequantize_logit(const Vector& pixels, double lambda,
                                           std::mt19937_64& rng) {
  if (!(lambda >= 0.0 && lambda < 0.5)) {
    throw ConfigError("dequantize_logit: lambda must be in [0, 0.5)");
  }
  constexpr double ln256 = 5.545177444479562;  // ln 256
  const double ln_scale = std::log1p(-2.0 * lambda);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Index n = pixels.size();
  Vector z(n);
  double correction = 0.0;
  for (Index i = 0; i < n; ++i) {
    double u;
    do {
      u = unif(rng);
    } while (u == 0.0);  // keep s strictly inside (0, 1)
    const double s = (pixels(i) + u) / 256.0;
    const double t = lambda + (1.0 - 2.0 * lambda) * s;
    z(i) = std::log(t) - std::log1p(-t);
    correction += ln_scale - std::log(t) - std::log1p(-t) - ln256;
  }
  return {std::move(z), correction};
}

void dequantize_logit_inplace(Dataset& ds, double lambda, std::uint64_t seed) {
  const Index m = ds.count();
  Vector corrections(m);
  for (Index r = 0; r < m; ++r) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(r));
    auto [z, corr] = dequantize_logit(ds.samples.row(r).transpose(), lambda, rng);
    ds.samples.row(r) = z.transpose();
    corrections(r) = corr;
  }
  ds.preprocess = PreprocessMeta{lambda, std::move(corrections)};
}

double bits_per_dim(double mean_nll_z, double mean_correction, Index n_dim) {
  if (n_dim < 1) throw ConfigError("bits_per_dim: n_dim must be >= 1");
  constexpr double ln2 = 0.6931471805599453;
  return (mean_nll_z - mean_correction) / (double(n_dim) * ln2);
}

Normalizer fit_normalizer(const Matrix& samples_rows) {
  const Index m = samples_rows.rows();
  const Index n = samples_rows.cols();
  if (m < 2) throw ConfigError("fit_normalizer: need at least 2 samples");

  Normalizer norm;
  norm.m = samples_rows.colwise().mean().transpose();
  Matrix centered = samples_rows.rowwise() - norm.m.transpose();
  Matrix cov = (centered.transpose() * centered) / double(m);

  const double base_ridge = cov.trace() / double(n);
  double ridge = 0.0;
  for (;;) {
    Eigen::LLT<Matrix> llt(ridge == 0.0
                               ? cov
                               : Matrix(cov + ridge * Matrix::Identity(n, n)));
    if (llt.info() == Eigen::Success) {
      norm.gamma = Matrix::Identity(n, n);
      llt.matrixL().solveInPlace(norm.gamma);  // Gamma = L^-1, still lower
      return norm;
    }
    if (ridge == 0.0) {
      ridge = 1e-6 * base_ridge;
    } else {
      ridge *= 2.0;
    }
    if (!(ridge > 0.0) || ridge > 1e-2 * base_ridge) {
      throw ConfigError(
          "fit_normalizer: covariance is not positive definite even with "
          "ridge; reduce the dimension or drop constant columns");
    }
  }
}

void apply_normalizer(const Normalizer& norm, Matrix& samples_rows) {
  samples_rows = (samples_rows.rowwise() - norm.m.transpose()) *
                 norm.gamma.transpose();
}

FlowModel absorb_normalizer(FlowModel model, const Normalizer& norm) {
  if (model.norm_absorbed) {
    throw ConfigError("absorb_normalizer: model already has one absorbed");
  }
  if (model.layers.empty() || model.n_dim() != norm.gamma.rows()) {
    throw ConfigError("absorb_normalizer: dimension mismatch");
  }
  TriUnit& first = model.layers.front();
  const Index N = first.n_dim;
  const Index B = first.block_size;

  const Materialized mat = materialize(first);
  const Matrix u_new = mat.u * norm.gamma;
  first.a -= u_new * norm.m;
  for (Index n = 0; n < N; ++n) {
    first.packed.block(n * B, 0, B, n) = u_new.block(n * B, 0, B, n);
    for (Index i = 0; i < B; ++i) {
      const double scaled = u_new(n * B + i, n);
      if (!(scaled > 0.0)) {
        throw ConfigError("absorb_normalizer: non-positive scaled diagonal");
      }
      // unchanged materialized value keeps its original raw encoding so an
      // identity normalizer is a bit-exact no-op
      if (scaled != mat.u(n * B + i, n)) {
        first.packed(n * B + i, n) = softplus_inverse(scaled);
      }
    }
  }
  model.norm_absorbed = true;
  return model;
}

Matrix augment_shift_rows(const Matrix& rows, const ImageGeometry& geom,
                          double max_frac, std::uint64_t seed) {
  if (rows.cols() != geom.pixels()) {
    throw ConfigError("augment_shift: geometry does not match row length");
  }
  const Index h = geom.height;
  const Index w = geom.width;
  const Index kx = static_cast<Index>(std::floor(max_frac * double(w)));
  const Index ky = static_cast<Index>(std::floor(max_frac * double(h)));
  Matrix out(rows.rows(), rows.cols());
  for (Index r = 0; r < rows.rows(); ++r) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(r));
    std::uniform_int_distribution<Index> ux(-kx, kx), uy(-ky, ky);
    const Index dx = ux(rng);
    const Index dy = uy(rng);
    for (Index ch = 0; ch < geom.channels; ++ch) {
      const Index plane = ch * h * w;
      for (Index y = 0; y < h; ++y) {
        const Index src_y = ((y - dy) % h + h) % h;
        for (Index x = 0; x < w; ++x) {
          const Index src_x = ((x - dx) % w + w) % w;
          out(r, plane + y * w + x) = rows(r, plane + src_y * w + src_x);
        }
      }
    }
  }
  return out;
}

Dataset augment_shift(const Dataset& images, double max_frac,
                      std::uint64_t seed) {
  if (!images.image_geom.has_value()) {
    throw ConfigError("augment_shift: dataset has no image geometry");
  }
  Dataset out = images;
  out.samples =
      augment_shift_rows(images.samples, *images.image_geom, max_frac, seed);
  return out;
}

}  // namespace triflow
