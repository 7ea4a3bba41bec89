#include "triflow/invert.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace triflow {

namespace {

constexpr double kBracketCap = 1e12;
constexpr int kMaxBisect = 200;

// Bisection for g(t) = target with g strictly increasing. The bracket starts
// at [warm-1, warm+1] and its half-width doubles until the residual changes
// sign, capped at kBracketCap.
template <class G>
double solve_monotone(const G& g, double target, double warm, double tol,
                      Index coord, InvertStats* stats) {
  double lo = warm - 1.0;
  double hi = warm + 1.0;
  double glo = g(lo);
  double ghi = g(hi);
  double half = 1.0;
  while (glo > target) {
    hi = lo;
    ghi = glo;
    half *= 2.0;
    if (half > kBracketCap) {
      throw NotInvertible("coordinate " + std::to_string(coord) +
                          ": target below achievable range");
    }
    lo = warm - half;
    glo = g(lo);
  }
  while (ghi < target) {
    lo = hi;
    glo = ghi;
    half *= 2.0;
    if (half > kBracketCap) {
      throw NotInvertible("coordinate " + std::to_string(coord) +
                          ": target above achievable range");
    }
    hi = warm + half;
    ghi = g(hi);
  }

  for (int it = 1; it <= kMaxBisect; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if (std::abs(gm - target) <= tol) {
      if (stats != nullptr) {
        ++stats->scalar_solves;
        stats->max_bisect_iterations =
            std::max(stats->max_bisect_iterations, static_cast<Index>(it));
      }
      return mid;
    }
    if (gm < target) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() *
                       std::max(1.0, std::abs(mid))) {
      break;
    }
  }
  throw ToleranceNotReached("coordinate " + std::to_string(coord) +
                            ": bisection stalled above tolerance");
}

}  // namespace

Vector invert_unit(const TriUnit& t, const Vector& y, double tol,
                   InvertStats* stats) {
  if (!(tol > 0)) throw ConfigError("invert_unit: tol must be positive");
  const Index N = t.n_dim;
  const Index B = t.block_size;
  if (y.size() != N) throw ConfigError("invert_unit: size mismatch");

  const Materialized mat = materialize(t);
  Vector x(N);
  Vector h(N * B);  // phi values of solved block rows
  for (Index n = 0; n < N; ++n) {
    // constant part: earlier blocks through V's off-diagonal row, plus bias
    double base = t.b(n);
    if (n > 0) {
      base += mat.v.row(n).head(n * B).dot(h.head(n * B));
    }
    // z contribution of the already-solved coordinates in block row n
    Vector w = t.a.segment(n * B, B);
    if (n > 0) {
      w.noalias() += mat.u.block(n * B, 0, B, n) * x.head(n);
    }
    const Vector u_n = mat.u.block(n * B, n, B, 1);
    const Vector v_n = mat.v.row(n).segment(n * B, B).transpose();
    const Nonlinearity kind = t.nonlinearity;
    auto g = [&](double tval) {
      double acc = base;
      for (Index i = 0; i < B; ++i) {
        acc += v_n(i) * nonlinearity_eval(kind, u_n(i) * tval + w(i)).phi;
      }
      return acc;
    };
    x(n) = solve_monotone(g, y(n), 0.0, tol, n, stats);
    for (Index i = 0; i < B; ++i) {
      h(n * B + i) = nonlinearity_eval(kind, u_n(i) * x(n) + w(i)).phi;
    }
  }
  return x;
}

Vector invert_flow(const FlowModel& model, const Vector& y, double tol,
                   InvertStats* stats) {
  Vector cur = y;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    if (model.flip_after[l]) cur = flip(cur);
    try {
      cur = invert_unit(model.layers[l], cur, tol, stats);
    } catch (const NotInvertible& e) {
      throw NotInvertible("layer " + std::to_string(l) + ": " + e.what());
    } catch (const ToleranceNotReached& e) {
      throw ToleranceNotReached("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return cur;
}

SampleResult sample(const FlowModel& model, Index count, std::uint64_t seed,
                    double tol) {
  const Index N = model.n_dim();
  SampleResult out;
  out.samples.resize(count, N);
  out.rejected = 0;

  Index accepted = 0;
  std::uint64_t attempt = 0;
  Index window_rejects = 0;
  while (accepted < count) {
    auto rng = make_rng(seed, attempt);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector y(N);
    for (Index i = 0; i < N; ++i) y(i) = gauss(rng);
    ++attempt;
    try {
      out.samples.row(accepted) = invert_flow(model, y, tol).transpose();
      ++accepted;
    } catch (const NotInvertible&) {
      ++out.rejected;
      ++window_rejects;
    }
    if (attempt % 64 == 0) {
      if (window_rejects > 32) {
        throw NotInvertible(
            "sampling aborted: rejection rate above 50% over the last 64 "
            "draws (" +
            std::to_string(window_rejects) +
            "/64); the model's Tanh ranges reject most of the base density");
      }
      window_rejects = 0;
    }
  }
  return out;
}

}  // namespace triflow
