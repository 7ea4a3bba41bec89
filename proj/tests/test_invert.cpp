#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "triflow/invert.hpp"

using namespace triflow;
using testsupport::random_model;
using testsupport::random_vector;

TEST_CASE("unit round trips") {
  for (Nonlinearity kind : {Nonlinearity::Tanh, Nonlinearity::LogSym}) {
    FlowModel model = random_model(4, 3, 1, kind, false, 61);
    const TriUnit& t = model.layers.front();
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
      const Vector x = random_vector(4, 3000 + k, 0.8);
      const auto fwd = unit_forward(t, x);
      const Vector back = invert_unit(t, fwd.y, 1e-10);
      worst = std::max(worst, (back - x).cwiseAbs().maxCoeff());
    }
    CAPTURE(to_string(kind));
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("tanh targets outside the range bound are not invertible") {
  TriUnit t;
  t.n_dim = 1;
  t.block_size = 1;
  t.packed = Matrix::Constant(1, 1, softplus_inverse(1.0));
  t.v_diag_raw = Vector::Constant(1, softplus_inverse(1.0));
  t.a = Vector::Zero(1);
  t.b = Vector::Zero(1);
  t.nonlinearity = Nonlinearity::Tanh;
  // |y| < sum_i |v_i| = 1 is the reachable set
  CHECK_THROWS_AS(invert_unit(t, Vector::Constant(1, 1.5), 1e-10),
                  NotInvertible);
  CHECK_THROWS_AS(invert_unit(t, Vector::Constant(1, -1.01), 1e-10),
                  NotInvertible);
  const Vector ok = invert_unit(t, Vector::Constant(1, 0.99), 1e-10);
  CHECK(std::tanh(ok(0)) == doctest::Approx(0.99).epsilon(1e-9));
}

TEST_CASE("logsym odd map fixes the origin") {
  TriUnit t;
  t.n_dim = 1;
  t.block_size = 1;
  t.packed = Matrix::Constant(1, 1, softplus_inverse(1.0));
  t.v_diag_raw = Vector::Constant(1, softplus_inverse(1.0));
  t.a = Vector::Zero(1);
  t.b = Vector::Zero(1);
  t.nonlinearity = Nonlinearity::LogSym;
  const Vector x = invert_unit(t, Vector::Zero(1), 1e-10);
  CHECK(std::abs(x(0)) < 1e-10);
}

TEST_CASE("flow round trips") {
  SUBCASE("logsym stacks to four layers") {
    for (Index l : {1, 2, 4}) {
      FlowModel model = random_model(3, 2, l, Nonlinearity::LogSym, true,
                                     70 + l);
      double worst = 0.0;
      for (int k = 0; k < 200; ++k) {
        const Vector x = random_vector(3, 5000 + k, 0.8);
        const auto fwd = flow_forward(model, x);
        const Vector back = invert_flow(model, fwd.y, 1e-10);
        worst = std::max(worst, (back - x).cwiseAbs().maxCoeff());
      }
      CAPTURE(l);
      CHECK(worst < 1e-6);
    }
  }
  SUBCASE("single layer reduces to invert_unit after the flip") {
    FlowModel model = random_model(4, 2, 1, Nonlinearity::LogSym, true, 75);
    const Vector y = random_vector(4, 42, 0.5);
    const Vector via_flow = invert_flow(model, y, 1e-10);
    const Vector via_unit = invert_unit(model.layers[0], flip(y), 1e-10);
    CHECK((via_flow - via_unit).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("errors carry the layer index") {
    FlowModel model = random_model(2, 1, 2, Nonlinearity::Tanh, false, 80);
    try {
      invert_flow(model, Vector::Constant(2, 1e6), 1e-10);
      FAIL("expected NotInvertible");
    } catch (const NotInvertible& e) {
      CHECK(std::string(e.what()).find("layer") != std::string::npos);
    }
  }
}

TEST_CASE("bisection iteration count stays within the bracketing bound") {
  // On slope <= O(1) maps the residual tolerance is reached no later than the
  // interval shrinking to tol, i.e. within 2 + ceil(log2(width/tol)) rounds.
  FlowModel model = random_model(3, 2, 1, Nonlinearity::LogSym, false, 90,
                                 /*roughness=*/0.1);
  const TriUnit& t = model.layers.front();
  const double tol = 1e-10;
  for (int k = 0; k < 50; ++k) {
    const Vector x = random_vector(3, 7000 + k, 0.6);
    const auto fwd = unit_forward(t, x);
    InvertStats stats;
    (void)invert_unit(t, fwd.y, tol, &stats);
    // bracket expansion never exceeds a few doublings here, so width <= 8
    const double bound = 2 + std::ceil(std::log2(8.0 / tol));
    CHECK(double(stats.max_bisect_iterations) <= bound);
  }
}

TEST_CASE("seeded sampling") {
  FlowModel model = random_model(3, 2, 2, Nonlinearity::LogSym, true, 95);
  const SampleResult a = sample(model, 64, 123);
  const SampleResult b = sample(model, 64, 123);
  CHECK(a.rejected == 0);  // logsym flows are bijective on R^N
  CHECK(b.rejected == 0);
  CHECK((a.samples - b.samples).cwiseAbs().maxCoeff() == 0.0);  // bit-identical
  const SampleResult c = sample(model, 64, 124);
  CHECK((a.samples - c.samples).cwiseAbs().maxCoeff() > 0.0);

  // draws map back to their latent points
  for (Index r = 0; r < 5; ++r) {
    const auto fwd = flow_forward(model, Vector(a.samples.row(r).transpose()));
    CHECK(fwd.y.allFinite());
  }
}

TEST_CASE("sampling aborts when tanh rejections dominate") {
  // a tanh unit squashed far from the base density rejects nearly everything
  TriUnit t;
  t.n_dim = 1;
  t.block_size = 1;
  t.packed = Matrix::Constant(1, 1, softplus_inverse(1.0));
  t.v_diag_raw = Vector::Constant(1, softplus_inverse(0.05));
  t.a = Vector::Zero(1);
  t.b = Vector::Zero(1);
  t.nonlinearity = Nonlinearity::Tanh;
  FlowModel model;
  model.layers.push_back(t);
  model.flip_after.push_back(false);
  // |y| < 0.05 reachable; P(|N(0,1)| < 0.05) ~ 4%
  CHECK_THROWS_AS(sample(model, 16, 7), NotInvertible);
}
