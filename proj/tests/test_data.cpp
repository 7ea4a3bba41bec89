#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "support.hpp"
#include "triflow/data.hpp"

using namespace triflow;
using testsupport::random_model;
using testsupport::random_vector;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("triflow_" + name))
      .string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()),
          static_cast<std::streamsize>(b.size()));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
}

void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back((x >> 24) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

}  // namespace

TEST_CASE("csv loading") {
  const std::string path = temp_path("basic.csv");
  write_text(path, "1,2\n3,4\n");
  const Dataset ds = load_csv(path);
  CHECK(ds.count() == 2);
  CHECK(ds.dim() == 2);
  CHECK(ds.samples(0, 0) == 1);
  CHECK(ds.samples(0, 1) == 2);
  CHECK(ds.samples(1, 0) == 3);
  CHECK(ds.samples(1, 1) == 4);

  write_text(path, "a,b\n1,2\n");
  CHECK_THROWS_AS(load_csv(path), FormatError);
  const Dataset with_header = load_csv(path, true);
  CHECK(with_header.count() == 1);

  write_text(path, "1,2\n3,oops\n");
  try {
    load_csv(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }

  write_text(path, "1,2\n3\n");
  CHECK_THROWS_AS(load_csv(path), FormatError);
  CHECK_THROWS_AS(load_csv(temp_path("missing_nope.csv")), IoError);
}

TEST_CASE("idx loading") {
  const std::string path = temp_path("img.idx");
  std::vector<unsigned char> bytes;
  push_be32(bytes, 0x00000803);
  push_be32(bytes, 1);  // count
  push_be32(bytes, 2);  // height
  push_be32(bytes, 2);  // width
  bytes.insert(bytes.end(), {7, 0, 255, 128});
  write_bytes(path, bytes);

  const Dataset ds = load_idx(path);
  CHECK(ds.count() == 1);
  CHECK(ds.dim() == 4);
  CHECK(ds.samples(0, 0) == 7);
  CHECK(ds.samples(0, 1) == 0);
  CHECK(ds.samples(0, 2) == 255);
  CHECK(ds.samples(0, 3) == 128);
  REQUIRE(ds.image_geom.has_value());
  CHECK(ds.image_geom->height == 2);
  CHECK(ds.image_geom->width == 2);
  CHECK(ds.image_geom->channels == 1);

  SUBCASE("wrong magic names both values") {
    bytes[3] = 0x01;  // 0x00000801
    write_bytes(path, bytes);
    try {
      load_idx(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("803") != std::string::npos);
      CHECK(msg.find("801") != std::string::npos);
    }
  }
  SUBCASE("truncated payload") {
    bytes.pop_back();
    write_bytes(path, bytes);
    CHECK_THROWS_AS(load_idx(path), FormatError);
  }
  SUBCASE("n_take limits rows") {
    std::vector<unsigned char> two;
    push_be32(two, 0x00000803);
    push_be32(two, 2);
    push_be32(two, 1);
    push_be32(two, 2);
    two.insert(two.end(), {1, 2, 3, 4});
    write_bytes(path, two);
    CHECK(load_idx(path).count() == 2);
    CHECK(load_idx(path, 1).count() == 1);
  }
}

TEST_CASE("cifar loading") {
  const std::string path = temp_path("batch.bin");
  std::vector<unsigned char> bytes;
  for (int rec = 0; rec < 2; ++rec) {
    bytes.push_back(static_cast<unsigned char>(rec + 1));  // label, dropped
    for (int i = 0; i < 3072; ++i) {
      bytes.push_back(static_cast<unsigned char>((i + rec) % 256));
    }
  }
  write_bytes(path, bytes);
  const Dataset ds = load_cifar_bin({path});
  CHECK(ds.count() == 2);
  CHECK(ds.dim() == 3072);
  CHECK(ds.samples(0, 0) == 0);    // label byte skipped
  CHECK(ds.samples(1, 0) == 1);
  CHECK(ds.image_geom->channels == 3);

  bytes.pop_back();
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_cifar_bin({path}), FormatError);
}

TEST_CASE("dequantize-logit map") {
  SUBCASE("corrections match the numerical log-derivative") {
    for (double lambda : {0.0, 1e-6, 0.05}) {
      Vector pixels(4);
      pixels << 0, 37, 128, 255;
      auto rng = make_rng(5, 0);
      const auto [z, corr] = dequantize_logit(pixels, lambda, rng);
      // recover s from z, then differentiate the pixel -> z map numerically
      double expected = 0.0;
      for (Index i = 0; i < 4; ++i) {
        const double t = 1.0 / (1.0 + std::exp(-z(i)));
        const double s = (t - lambda) / (1.0 - 2.0 * lambda);
        auto map = [lambda](double sv) {
          const double tv = lambda + (1.0 - 2.0 * lambda) * sv;
          return std::log(tv) - std::log1p(-tv);
        };
        const double eps = 1e-7;
        const double dz_ds = (map(s + eps) - map(s - eps)) / (2 * eps);
        expected += std::log(dz_ds / 256.0);
      }
      CHECK(corr == doctest::Approx(expected).epsilon(1e-6));
    }
  }
  SUBCASE("midpoint arithmetic") {
    // s = 0.5 maps to z = 0 with per-dim correction ln 4 - ln 256
    const double t = 0.5;
    CHECK(std::log(t) - std::log1p(-t) == 0.0);
    CHECK(std::log(4.0) - std::log(256.0) == doctest::Approx(-4.1588830834));
  }
  SUBCASE("monotone in the pixel value for a fixed draw") {
    for (double lambda : {1e-6, 0.05}) {
      double prev = -1e300;
      for (int p = 0; p < 256; p += 15) {
        auto rng = make_rng(9, 3);  // same stream, same u
        const auto [z, corr] =
            dequantize_logit(Vector::Constant(1, double(p)), lambda, rng);
        CHECK(z(0) > prev);
        prev = z(0);
      }
    }
  }
  SUBCASE("outputs stay finite at the pixel extremes") {
    Vector pixels(2);
    pixels << 0, 255;
    for (double lambda : {0.0, 1e-6, 0.05}) {
      for (std::uint64_t s = 0; s < 50; ++s) {
        auto rng = make_rng(s, 1);
        const auto [z, corr] = dequantize_logit(pixels, lambda, rng);
        CHECK(z.allFinite());
        CHECK(std::isfinite(corr));
      }
    }
  }
  SUBCASE("dataset-level pass is reproducible per record") {
    Dataset ds;
    ds.samples.resize(3, 2);
    ds.samples << 0, 10, 20, 30, 250, 255;
    ds.splits.train = {0, 3};
    Dataset copy = ds;
    dequantize_logit_inplace(ds, 1e-6, 77);
    dequantize_logit_inplace(copy, 1e-6, 77);
    CHECK((ds.samples - copy.samples).cwiseAbs().maxCoeff() == 0.0);
    CHECK(ds.preprocess.has_value());
    CHECK(ds.preprocess->correction.size() == 3);
  }
}

TEST_CASE("bits per dimension") {
  // the paper's table arithmetic pins the conversion
  const double mnist = bits_per_dim(703.0, 0.0, 784) - bits_per_dim(654.0, 0.0, 784);
  CHECK(std::abs(mnist - (1.15 - 1.06)) < 1e-3);
  const double cifar =
      bits_per_dim(-3558.0, 0.0, 3072) - bits_per_dim(-4515.0, 0.0, 3072);
  CHECK(std::abs(cifar - (4.07 - 3.62)) < 1e-3);
  CHECK(bits_per_dim(1.234, 1.234, 17) == 0.0);
  // shared constants cancel
  CHECK(bits_per_dim(10.0 + 3.3, -2.0 + 3.3, 5) ==
        doctest::Approx(bits_per_dim(10.0, -2.0, 5)).epsilon(1e-12));
}

TEST_CASE("normalizer fitting") {
  SUBCASE("white data is a no-op") {
    Matrix rows(4, 2);
    const double a = std::sqrt(2.0);
    rows << a, 0, -a, 0, 0, a, 0, -a;
    const Normalizer norm = fit_normalizer(rows);
    CHECK(norm.m.cwiseAbs().maxCoeff() < 1e-12);
    CHECK((norm.gamma - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("1d variance four halves the scale") {
    Matrix rows(2, 1);
    rows << -2, 2;
    const Normalizer norm = fit_normalizer(rows);
    CHECK(norm.gamma(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("transformed sample covariance is the identity") {
    Matrix rows(500, 4);
    for (Index r = 0; r < rows.rows(); ++r) {
      rows.row(r) = random_vector(4, 4000 + r, 2.0).transpose();
      rows(r, 2) += 0.8 * rows(r, 0);  // correlate
      rows(r, 3) -= 1.5;
    }
    const Normalizer norm = fit_normalizer(rows);
    Matrix white = rows;
    apply_normalizer(norm, white);
    CHECK(white.colwise().mean().cwiseAbs().maxCoeff() < 1e-10);
    const Matrix cov = (white.transpose() * white) / double(white.rows());
    CHECK((cov - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-6);
    // lower-triangular with positive diagonal
    for (Index i = 0; i < 4; ++i) {
      CHECK(norm.gamma(i, i) > 0.0);
      for (Index j = i + 1; j < 4; ++j) CHECK(norm.gamma(i, j) == 0.0);
    }
  }
  SUBCASE("singular covariance falls back to the ridge") {
    Matrix rows(50, 3);
    for (Index r = 0; r < rows.rows(); ++r) {
      const double v = double(r) - 24.5;
      rows(r, 0) = v;
      rows(r, 1) = 2.0 * v;  // exact linear dependence
      rows(r, 2) = random_vector(1, 600 + r)(0);
    }
    const Normalizer norm = fit_normalizer(rows);
    CHECK(norm.gamma.allFinite());
    for (Index i = 0; i < 3; ++i) CHECK(norm.gamma(i, i) > 0.0);
  }
  SUBCASE("too few samples") {
    CHECK_THROWS_AS(fit_normalizer(Matrix::Zero(1, 2)), ConfigError);
  }
}

TEST_CASE("normalizer absorption") {
  SUBCASE("identity normalizer is a bit-exact no-op") {
    FlowModel model = random_model(3, 2, 2, Nonlinearity::LogSym, true, 300);
    Normalizer norm;
    norm.m = Vector::Zero(3);
    norm.gamma = Matrix::Identity(3, 3);
    const FlowModel absorbed = absorb_normalizer(model, norm);
    CHECK(absorbed.norm_absorbed);
    const auto before = materialize(model.layers[0]);
    const auto after = materialize(absorbed.layers[0]);
    CHECK((before.u - after.u).cwiseAbs().maxCoeff() == 0.0);
    CHECK((before.v - after.v).cwiseAbs().maxCoeff() == 0.0);
    CHECK((model.layers[0].a - absorbed.layers[0].a).cwiseAbs().maxCoeff() ==
          0.0);
  }
  SUBCASE("absorbed model equals whiten-then-apply") {
    for (Index n : {1, 2, 4, 6}) {
      FlowModel model =
          random_model(n, 2, 2, Nonlinearity::LogSym, true, 310 + n);
      Matrix rows(200, n);
      for (Index r = 0; r < rows.rows(); ++r) {
        rows.row(r) = random_vector(n, 8000 + r, 1.5).transpose();
      }
      const Normalizer norm = fit_normalizer(rows);
      const FlowModel absorbed = absorb_normalizer(model, norm);
      const double logdet_gamma = norm.sum_log_diag();

      for (int k = 0; k < 10; ++k) {
        const Vector x = random_vector(n, 9000 + k, 2.0);
        const Vector xw = norm.gamma * (x - norm.m);
        const auto direct = flow_forward(absorbed, x);
        const auto via = flow_forward(model, xw);
        CHECK((direct.y - via.y).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(direct.logdet ==
              doctest::Approx(via.logdet + logdet_gamma).epsilon(1e-10));
        // NLL identity from the change of variables
        CHECK(nll(direct.y, direct.logdet) ==
              doctest::Approx(nll(via.y, via.logdet) - logdet_gamma)
                  .epsilon(1e-10));
      }
    }
  }
  SUBCASE("double absorption is rejected") {
    FlowModel model = random_model(2, 1, 1, Nonlinearity::Tanh, false, 320);
    Normalizer norm;
    norm.m = Vector::Zero(2);
    norm.gamma = Matrix::Identity(2, 2);
    const FlowModel absorbed = absorb_normalizer(model, norm);
    CHECK_THROWS_AS(absorb_normalizer(absorbed, norm), ConfigError);
  }
}

TEST_CASE("circular shift augmentation") {
  ImageGeometry geom{4, 4, 1};
  SUBCASE("k = 0 is the identity") {
    Matrix rows(3, 16);
    for (Index r = 0; r < 3; ++r) {
      rows.row(r) = random_vector(16, 100 + r).transpose();
    }
    const Matrix out = augment_shift_rows(rows, geom, 0.1, 5);  // k = 0 at 4px
    CHECK((out - rows).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("mnist-sized fraction gives k = 2") {
    // floor(0.1 * 28) = 2: over many records a 2-pixel shift appears and no
    // larger one ever does
    ImageGeometry big{28, 28, 1};
    Matrix rows(400, 28 * 28);
    rows.setZero();
    for (Index r = 0; r < rows.rows(); ++r) rows(r, 14 * 28 + 14) = 1.0;
    const Matrix out = augment_shift_rows(rows, big, 0.1, 9);
    Index max_dx = 0, max_dy = 0;
    for (Index r = 0; r < rows.rows(); ++r) {
      Index flat = -1;
      for (Index c = 0; c < out.cols(); ++c) {
        if (out(r, c) == 1.0) flat = c;
      }
      REQUIRE(flat >= 0);
      const Index dy = flat / 28 - 14;
      const Index dx = flat % 28 - 14;
      max_dx = std::max(max_dx, std::abs(dx));
      max_dy = std::max(max_dy, std::abs(dy));
    }
    CHECK(max_dx == 2);
    CHECK(max_dy == 2);
  }
  SUBCASE("pixel multiset is preserved and wraps whole periods") {
    Dataset ds;
    ds.samples.resize(60, 9);
    for (Index r = 0; r < 60; ++r) {
      ds.samples.row(r) = random_vector(9, 700 + r).transpose();
    }
    ds.image_geom = ImageGeometry{3, 3, 1};
    ds.splits.train = {0, 60};
    const Dataset out = augment_shift(ds, 1.0, 13);  // k = 3 = full period
    for (Index r = 0; r < 60; ++r) {
      std::multiset<double> a, b;
      for (Index c = 0; c < 9; ++c) {
        a.insert(ds.samples(r, c));
        b.insert(out.samples(r, c));
      }
      CHECK(a == b);
      // every outcome is one of the 9 circular shifts of the source
      bool matched = false;
      for (Index dy = 0; dy < 3 && !matched; ++dy) {
        for (Index dx = 0; dx < 3 && !matched; ++dx) {
          bool same = true;
          for (Index y = 0; y < 3 && same; ++y) {
            for (Index x = 0; x < 3 && same; ++x) {
              const Index sy = (y + dy) % 3;
              const Index sx = (x + dx) % 3;
              same = out.samples(r, y * 3 + x) == ds.samples(r, sy * 3 + sx);
            }
          }
          matched = same;
        }
      }
      CHECK(matched);
    }
  }
  SUBCASE("non-image data is rejected") {
    Dataset ds;
    ds.samples = Matrix::Zero(2, 5);
    CHECK_THROWS_AS(augment_shift(ds, 0.1, 1), ConfigError);
  }
}

TEST_CASE("tail split") {
  Dataset ds;
  ds.samples = Matrix::Zero(100, 2);
  assign_tail_split(ds, 0.15, 0.25);
  CHECK(ds.splits.train.begin == 0);
  CHECK(ds.splits.train.end == 60);
  CHECK(ds.splits.validation.begin == 60);
  CHECK(ds.splits.validation.end == 75);
  CHECK(ds.splits.test.begin == 75);
  CHECK(ds.splits.test.end == 100);
  CHECK_THROWS_AS(assign_tail_split(ds, 0.6, 0.5), ConfigError);
}
