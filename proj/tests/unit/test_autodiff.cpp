#include <doctest.h>

#include <cmath>
#include <functional>

#include "dualct/autodiff.hpp"
#include "dualct/error.hpp"
#include "dualct/projector.hpp"
#include "dualct/recon.hpp"
#include "test_util.hpp"

using namespace dualct;
using testutil::random_vector;
using testutil::rel_diff;

namespace {

using Graph = std::function<Tape::Var(Tape&, Tape::Var)>;

double evaluate(const Graph& f, const std::vector<double>& x) {
  Tape tape;
  const Tape::Var root = f(tape, tape.parameter(x));
  return tape.value(root)[0];
}

std::vector<double> tape_gradient(const Graph& f, const std::vector<double>& x) {
  Tape tape;
  const Tape::Var leaf = tape.parameter(x);
  tape.backward(f(tape, leaf));
  return tape.grad(leaf);
}

std::vector<double> central_differences(const Graph& f, std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = evaluate(f, x);
    x[i] = keep - h;
    const double down = evaluate(f, x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Reduces any node to a scalar with a nonuniform upstream gradient.
Tape::Var reduce(Tape& tape, Tape::Var v, std::uint64_t seed) {
  const auto target = random_vector(tape.value(v).size(), seed);
  return ops::mse(tape, v, target);
}

// Values kept away from the kinks of relu and the clamp.
std::vector<double> away_from_zero(std::size_t n, std::uint64_t seed) {
  auto v = random_vector(n, seed);
  for (double& x : v) x += x >= 0.0 ? 0.1 : -0.1;
  return v;
}

void check_gradient(const Graph& f, const std::vector<double>& x, double h = 1e-6, double tol = 1e-5) {
  const auto analytic = tape_gradient(f, x);
  const auto numeric = central_differences(f, x, h);
  CHECK(rel_diff(analytic, numeric) <= tol);
}

}  // namespace

TEST_CASE("tape basics") {
  Tape tape;
  const auto c = tape.constant({1.0, 2.0});
  const auto p = tape.parameter({3.0, 4.0});
  CHECK(!tape.requires_grad(c));
  CHECK(tape.requires_grad(p));
  const auto d = ops::sub(tape, p, c);
  CHECK(tape.requires_grad(d));
  CHECK(tape.value(d) == std::vector<double>{2.0, 2.0});
  const auto s = ops::sum(tape, d);
  CHECK(tape.value(s)[0] == 4.0);
  tape.backward(s);
  CHECK(tape.grad(p) == std::vector<double>{1.0, 1.0});
  CHECK(tape.grad(c) == std::vector<double>{0.0, 0.0});
  CHECK(tape.size() == 4);
  CHECK_THROWS(tape.backward(d));  // not a scalar
}

TEST_CASE("mse and sum closed forms") {
  Tape tape;
  const auto x = tape.parameter({1.0, 3.0, -2.0, 0.5});
  const std::vector<double> t{0.0, 1.0, 0.0, 0.5};
  const auto m = ops::mse(tape, x, t);
  CHECK(tape.value(m)[0] == doctest::Approx((1.0 + 4.0 + 4.0 + 0.0) / 4.0));
  tape.backward(m);
  const auto g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[1] == doctest::Approx(1.0));
  CHECK(g[2] == doctest::Approx(-1.0));
  CHECK(g[3] == 0.0);
  check_gradient([](Tape& t, Tape::Var v) { return ops::sum(t, ops::relu(t, v)); }, away_from_zero(10, 1));
}

TEST_CASE("finite differences: elementwise primitives") {
  const auto x = away_from_zero(24, 2);
  check_gradient([](Tape& t, Tape::Var v) { return reduce(t, ops::relu(t, v), 3); }, x);
  check_gradient([](Tape& t, Tape::Var v) { return reduce(t, ops::clamp_nonneg(t, v), 4); }, x);
  check_gradient(
      [](Tape& t, Tape::Var v) {
        const auto c = t.constant(random_vector(24, 5));
        return reduce(t, ops::sub(t, c, v), 6);
      },
      x);
  check_gradient([](Tape& t, Tape::Var v) { return reduce(t, ops::scale_planes(t, v, {2.5, -0.3}), 7); }, x);
  check_gradient([](Tape& t, Tape::Var v) { return ops::mse(t, v, random_vector(24, 8)); }, x);

  // the clamp passes gradient only where the input is positive
  Tape tape;
  const auto v = tape.parameter({-1.0, 2.0, 0.0, 3.0});
  const auto y = ops::clamp_nonneg(tape, v);
  CHECK(tape.value(y) == std::vector<double>{0.0, 2.0, 0.0, 3.0});
  tape.backward(ops::sum(tape, y));
  CHECK(tape.grad(v) == std::vector<double>{0.0, 1.0, 0.0, 1.0});
}

TEST_CASE("conv2d against a direct loop oracle") {
  const ConvShape s{2, 3, 3, 5, 4};
  const auto x = random_vector(2 * 20, 1);
  const auto w = random_vector(3 * 2 * 9, 2);
  const auto b = random_vector(3, 3);
  std::vector<double> y(3 * 20);
  conv2d_forward(s, x, w, b, y);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || ii >= 4 || jj < 0 || jj >= 5) continue;
              acc += w[((o * 2 + c) * 3 + (di + 1)) * 3 + (dj + 1)] * x[(c * 4 + ii) * 5 + jj];
            }
        CHECK(y[(o * 4 + i) * 5 + j] == doctest::Approx(acc).epsilon(1e-13));
      }

  std::vector<double> wrong(7);
  CHECK_THROWS_AS(conv2d_forward(s, x, w, b, wrong), DimensionError);
}

TEST_CASE("finite differences: conv2d inputs, weights and bias") {
  const ConvShape s{2, 3, 3, 6, 5};
  const auto x = random_vector(2 * 30, 11);
  const auto w = random_vector(3 * 2 * 9, 12);
  const auto b = random_vector(3, 13);
  check_gradient(
      [&](Tape& t, Tape::Var v) { return reduce(t, ops::conv2d(t, s, v, t.constant(w), t.constant(b)), 14); }, x);
  check_gradient(
      [&](Tape& t, Tape::Var v) { return reduce(t, ops::conv2d(t, s, t.constant(x), v, t.constant(b)), 15); }, w);
  check_gradient(
      [&](Tape& t, Tape::Var v) { return reduce(t, ops::conv2d(t, s, t.constant(x), t.constant(w), v), 16); }, b);

  const ConvShape five{1, 2, 5, 7, 7};
  check_gradient(
      [&](Tape& t, Tape::Var v) {
        return reduce(t, ops::conv2d(t, five, t.constant(random_vector(49, 17)), v, t.constant({0.1, -0.2})), 18);
      },
      random_vector(2 * 25, 19));
}

TEST_CASE("finite differences: projector pair") {
  const Projector proj(Geometry::parallel({8, 8, 0.25}, 6, 12));
  check_gradient([&](Tape& t, Tape::Var v) { return reduce(t, ops::forward_project(t, proj, v), 21); },
                 random_vector(64, 20));
  check_gradient([&](Tape& t, Tape::Var v) { return reduce(t, ops::back_project(t, proj, v), 23); },
                 random_vector(72, 22));
}

TEST_CASE("finite differences: implicit DC solve") {
  const ImageShape shape{8, 8, 0.25};
  const Projector proj(Geometry::parallel(shape, 10, 12));
  const std::size_t rays = proj.geometry().rays();
  MaterialSinogram p = MaterialSinogram::zeros(10, 12);
  p.p[0] = random_vector(rays, 31, 0.0, 2.0);
  p.p[1] = random_vector(rays, 32, 0.0, 2.0);
  const DCSystem sys(proj, {random_vector(rays, 33, 0.5, 2.0), random_vector(rays, 34, 0.5, 2.0)}, p);
  ReconConfig cfg;
  cfg.cg_max_iter = 500;
  cfg.cg_rel_tol = 1e-13;
  for (double lambda : {0.05, 1.0}) {
    const Graph f = [&](Tape& t, Tape::Var z) { return reduce(t, ops::dc_solve(t, sys, lambda, cfg, z), 35); };
    const auto z = random_vector(128, 36);
    const auto analytic = tape_gradient(f, z);
    const auto numeric = central_differences(f, z, 1e-4);
    CHECK(rel_diff(analytic, numeric) <= 1e-5);
  }

  // ten entries through dc_backward directly: d x / d z_i applied to upstream
  const double lambda = 0.3;
  const auto g = random_vector(128, 37);
  const auto vjp = dc_backward(sys, lambda, g, cfg);
  MaterialImage z = MaterialImage::zeros(shape);
  z.densities = random_vector(128, 38);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = (k * 37 + 5) % 128;
    MaterialImage zp = z, zm = z;
    zp.densities[i] += 1e-4;
    zm.densities[i] -= 1e-4;
    const auto xp = dc_solve_unclamped(sys, zp, lambda, cfg).densities;
    const auto xm = dc_solve_unclamped(sys, zm, lambda, cfg).densities;
    double fd = 0.0;
    for (std::size_t m = 0; m < 128; ++m) fd += g[m] * (xp[m] - xm[m]) / 2e-4;
    CHECK(vjp[i] == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("composite graph through conv, relu, projector and clamp") {
  const ImageShape shape{6, 6, 0.5};
  const Projector proj(Geometry::parallel(shape, 5, 9));
  const ConvShape s{1, 2, 3, 6, 6};
  const auto x = random_vector(36, 41);
  const auto b = random_vector(2, 42);
  check_gradient(
      [&](Tape& t, Tape::Var w) {
        auto h = ops::relu(t, ops::conv2d(t, s, t.constant(x), w, t.constant(b)));
        const ConvShape back{2, 1, 3, 6, 6};
        auto y = ops::conv2d(t, back, h, t.constant(random_vector(18, 43)), t.constant({0.05}));
        auto sino = ops::forward_project(t, proj, ops::clamp_nonneg(t, ops::sub(t, t.constant(x), y)));
        return reduce(t, sino, 44);
      },
      random_vector(18, 45), 1e-6, 1e-5);
}
