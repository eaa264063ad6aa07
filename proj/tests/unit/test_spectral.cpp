#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dualct/error.hpp"
#include "dualct/io.hpp"
#include "dualct/log.hpp"
#include "dualct/phantom.hpp"
#include "dualct/projector.hpp"
#include "dualct/spectral.hpp"
#include "test_util.hpp"

using namespace dualct;
using testutil::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Piecewise-linear evaluation by scanning for the bracketing segment.
double interp_oracle(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  for (std::size_t k = 0; k + 1 < xs.size(); ++k) {
    if (x >= xs[k] && x <= xs[k + 1]) {
      const double t = (x - xs[k]) / (xs[k + 1] - xs[k]);
      return ys[k] + t * (ys[k + 1] - ys[k]);
    }
  }
  return NAN;
}

}  // namespace

TEST_CASE("energy grid invariants") {
  const EnergyGrid g = EnergyGrid::diagnostic();
  CHECK(g.size() == 101);
  CHECK(g.front() == 20.0);
  CHECK(g.back() == 120.0);
  CHECK(g.delta() == 1.0);
  CHECK_THROWS_AS(EnergyGrid(std::vector<double>{1.0}), ValidationError);
  CHECK_THROWS_AS(EnergyGrid(std::vector<double>{1.0, 3.0, 2.0}), ValidationError);
  CHECK_THROWS_AS(EnergyGrid(std::vector<double>{1.0, 2.0, 4.0}), ValidationError);
  CHECK_THROWS_AS(EnergyGrid(10.0, 5.0, 1.0), ValidationError);
}

TEST_CASE("load_table returns node values verbatim") {
  TempDir dir("table");
  const EnergyGrid grid(20.0, 30.0, 1.0);
  const auto a = testutil::random_vector(grid.size(), 1, 0.1, 2.0);
  const auto b = testutil::random_vector(grid.size(), 2, 0.1, 2.0);
  std::string text = "# energy a b\n";
  for (std::size_t i = 0; i < grid.size(); ++i)
    text += format_double(grid.energies()[i]) + " " + format_double(a[i]) + " " + format_double(b[i]) + "\n";
  write_file(dir / "t.txt", text);
  const auto cols = load_table(dir / "t.txt", grid);
  REQUIRE(cols.size() == 2);
  CHECK(cols[0] == a);
  CHECK(cols[1] == b);
}

TEST_CASE("load_table interpolates linearly") {
  TempDir dir("table");
  write_file(dir / "t.txt", "20 1.0\n40 3.0\n");
  const auto cols = load_table(dir / "t.txt", EnergyGrid(20.0, 40.0, 10.0));
  CHECK(cols[0][1] == doctest::Approx(2.0).epsilon(1e-15));

  // random 10-node table against a direct per-point oracle
  std::vector<double> xs{15.0};
  auto steps = testutil::random_vector(9, 3, 2.0, 15.0);
  for (double s : steps) xs.push_back(xs.back() + s);
  const auto ys = testutil::random_vector(10, 4, 0.0, 5.0);
  std::string text;
  for (int k = 0; k < 10; ++k) text += format_double(xs[k]) + "\t" + format_double(ys[k]) + "\n";
  write_file(dir / "r.txt", text);
  const EnergyGrid grid(20.0, std::floor(xs.back()) - 1.0, 0.5);
  const auto got = load_table(dir / "r.txt", grid)[0];
  for (std::size_t g = 0; g < grid.size(); ++g)
    CHECK(std::abs(got[g] - interp_oracle(xs, ys, grid.energies()[g])) <= 1e-12);
}

TEST_CASE("load_table errors") {
  TempDir dir("table");
  write_file(dir / "bad.txt", "# header\n20 1\n30 x\n");
  try {
    load_table(dir / "bad.txt", EnergyGrid(20.0, 30.0, 1.0));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  write_file(dir / "short.txt", "25 1\n30 1\n");
  CHECK_THROWS_AS(load_table(dir / "short.txt", EnergyGrid(20.0, 30.0, 1.0)), RangeError);
  write_file(dir / "cols.txt", "20 1 2 3 4\n30 1 2 3 4\n");
  CHECK_THROWS_AS(load_table(dir / "cols.txt", EnergyGrid(20.0, 30.0, 1.0)), ParseError);
  CHECK_THROWS_AS(load_table(dir / "missing.txt", EnergyGrid(20.0, 30.0, 1.0)), IoError);
}

TEST_CASE("load_spectrum renormalizes rows and keeps i0") {
  TempDir dir("spec");
  write_file(dir / "s.txt", "20 2 0\n25 4 1\n30 2 3\n");
  const Spectrum s = load_spectrum(dir / "s.txt", EnergyGrid(20.0, 30.0, 5.0), 1e5);
  CHECK(s.i0 == 1e5);
  for (int k = 0; k < 2; ++k)
    CHECK(std::abs(std::accumulate(s.weights[k].begin(), s.weights[k].end(), 0.0) - 1.0) <= 1e-12);
  CHECK(s.weights[0][1] == doctest::Approx(0.5));

  write_file(dir / "lo.txt", "20 1\n30 1\n");
  write_file(dir / "hi.txt", "20 0\n30 1\n");
  const Spectrum pair = load_spectrum(dir / "lo.txt", dir / "hi.txt", EnergyGrid(20.0, 30.0, 5.0), 10.0);
  CHECK(pair.weights[1][0] == 0.0);
  CHECK(pair.weights[1][2] == doctest::Approx(2.0 / 3.0));

  // round trip through save_table
  save_table(dir / "out.txt", s.grid, s.weights, "spectrum");
  const Spectrum back = load_spectrum(dir / "out.txt", s.grid, 1e5);
  for (int k = 0; k < 2; ++k) CHECK(back.weights[k] == s.weights[k]);
}

TEST_CASE("load_basis rejects non-positive and dependent rows") {
  TempDir dir("basis");
  const EnergyGrid grid(20.0, 30.0, 5.0);
  write_file(dir / "zero.txt", "20 1 1\n25 0 1\n30 1 1\n");
  CHECK_THROWS_AS(load_basis(dir / "zero.txt", grid), ValidationError);
  write_file(dir / "dep.txt", "20 1 2\n25 2 4\n30 3 6\n");
  CHECK_THROWS_AS(load_basis(dir / "dep.txt", grid), ValidationError);
  write_file(dir / "ok.txt", "20 3 1\n25 2 1\n30 1 1\n");
  const MaterialBasis b = load_basis(dir / "ok.txt", grid);
  CHECK(b.phi[0][0] == 3.0);
}

TEST_CASE("synthetic spectra") {
  const EnergyGrid grid = EnergyGrid::diagnostic();
  const Spectrum d = make_synthetic_spectrum(SpectrumKind::DeltaPair, grid, 1e5);
  CHECK(d.i0 == 1e5);
  for (int k = 0; k < 2; ++k) {
    CHECK(std::count_if(d.weights[k].begin(), d.weights[k].end(), [](double v) { return v != 0.0; }) == 1);
    CHECK(d.weights[k][grid.nearest(k == 0 ? 50.0 : 80.0)] == 1.0);
  }
  const Spectrum t = make_synthetic_spectrum(SpectrumKind::TriangularPair, grid, 1e5);
  CHECK(t.i0 == 1e5);
  for (int k = 0; k < 2; ++k) {
    CHECK(std::abs(std::accumulate(t.weights[k].begin(), t.weights[k].end(), 0.0) - 1.0) <= 1e-12);
    for (double v : t.weights[k]) CHECK(v >= 0.0);
  }

  // off-grid delta snaps to the nearest node
  set_log_level(LogLevel::Quiet);
  SyntheticSpectrumOptions opt;
  opt.delta_kev = {50.4, 79.6};
  const Spectrum snapped = make_synthetic_spectrum(SpectrumKind::DeltaPair, grid, 1e5, opt);
  CHECK(snapped.weights[0][grid.nearest(50.0)] == 1.0);
  CHECK(snapped.weights[1][grid.nearest(80.0)] == 1.0);
  set_log_level(LogLevel::Warning);
}

TEST_CASE("expected_counts closed forms") {
  const EnergyGrid grid = EnergyGrid::diagnostic();
  const MaterialBasis basis = make_synthetic_basis(grid);
  for (auto kind : {SpectrumKind::DeltaPair, SpectrumKind::TriangularPair}) {
    const Spectrum s = make_synthetic_spectrum(kind, grid, 1e5);
    const auto c = expected_counts(std::array<double, 2>{0.0, 0.0}, s, basis);
    CHECK(c[0] == doctest::Approx(1e5).epsilon(1e-14));
    CHECK(c[1] == doctest::Approx(1e5).epsilon(1e-14));
  }

  // monoenergetic Beer-Lambert
  const Spectrum d = make_synthetic_spectrum(SpectrumKind::DeltaPair, grid, 1e5);
  const std::array<double, 2> p{300.0, 150.0};
  const auto c = expected_counts(p, d, basis);
  for (int k = 0; k < 2; ++k) {
    const std::size_t e = grid.nearest(k == 0 ? 50.0 : 80.0);
    const double want = 1e5 * std::exp(-p[0] * basis.phi[0][e] - p[1] * basis.phi[1][e]);
    CHECK(testutil::rel_err(c[k], want) <= 1e-14);
  }

  // 3-node grid, hand-picked values, summed by hand
  const EnergyGrid g3(std::vector<double>{30.0, 40.0, 50.0});
  Spectrum s3{g3, {std::vector<double>{0.5, 0.3, 0.2}, std::vector<double>{0.1, 0.2, 0.7}}, 1000.0};
  MaterialBasis b3{g3, {std::vector<double>{0.004, 0.003, 0.002}, std::vector<double>{0.001, 0.0015, 0.0025}}};
  const std::array<double, 2> q{100.0, 200.0};
  const auto c3 = expected_counts(q, s3, b3);
  const double e0 = std::exp(-(100 * 0.004 + 200 * 0.001));
  const double e1 = std::exp(-(100 * 0.003 + 200 * 0.0015));
  const double e2 = std::exp(-(100 * 0.002 + 200 * 0.0025));
  CHECK(testutil::rel_err(c3[0], 1000.0 * (0.5 * e0 + 0.3 * e1 + 0.2 * e2)) <= 1e-14);
  CHECK(testutil::rel_err(c3[1], 1000.0 * (0.1 * e0 + 0.2 * e1 + 0.7 * e2)) <= 1e-14);

  // grid mismatch
  CHECK_THROWS_AS(expected_counts(q, s3, basis), DimensionError);
}

TEST_CASE("expected_counts is decreasing in each material and h is linear for delta spectra") {
  const EnergyGrid grid = EnergyGrid::diagnostic();
  const MaterialBasis basis = make_synthetic_basis(grid);
  const Spectrum t = make_synthetic_spectrum(SpectrumKind::TriangularPair, grid, 1e5);
  for (double p1 : {0.0, 500.0, 2000.0}) {
    for (double p2 : {0.0, 500.0, 2000.0}) {
      const auto base = expected_counts(std::array<double, 2>{p1, p2}, t, basis);
      const auto more1 = expected_counts(std::array<double, 2>{p1 + 10.0, p2}, t, basis);
      const auto more2 = expected_counts(std::array<double, 2>{p1, p2 + 10.0}, t, basis);
      for (int k = 0; k < 2; ++k) {
        CHECK(more1[k] < base[k]);
        CHECK(more2[k] < base[k]);
        CHECK(base[k] > 0.0);
        CHECK(base[k] <= t.i0);
      }
    }
  }
  const Spectrum d = make_synthetic_spectrum(SpectrumKind::DeltaPair, grid, 1e5);
  const auto h = forward_map({700.0, 300.0}, d, basis);
  for (int k = 0; k < 2; ++k) {
    const std::size_t e = grid.nearest(k == 0 ? 50.0 : 80.0);
    CHECK(testutil::rel_err(h[k], 700.0 * basis.phi[0][e] + 300.0 * basis.phi[1][e]) <= 1e-12);
  }
}

TEST_CASE("simulate: empty object, determinism, clamping") {
  const EnergyGrid grid = EnergyGrid::diagnostic();
  const MaterialBasis basis = make_synthetic_basis(grid);
  const Spectrum s = make_synthetic_spectrum(SpectrumKind::TriangularPair, grid, 1e5);
  const ImageShape shape{16, 16, 0.1};
  const Projector proj(Geometry::parallel(shape, 100, 100));
  const MaterialImage zero = MaterialImage::zeros(shape);
  const EnergySinogram y = simulate(zero, proj, s, basis, 5);
  REQUIRE(y.rays() == 10000);
  for (int k = 0; k < 2; ++k) {
    const double mean = std::accumulate(y.y[k].begin(), y.y[k].end(), 0.0) / double(y.rays());
    CHECK(std::abs(mean) <= 3.0 / std::sqrt(s.i0));
    for (std::size_t r = 0; r < y.rays(); ++r) CHECK(y.weights[k][r] == doctest::Approx(s.i0 * std::exp(-y.y[k][r])));
  }
  const EnergySinogram again = simulate(zero, proj, s, basis, 5);
  CHECK(again.y == y.y);
  CHECK(again.weights == y.weights);
  const EnergySinogram other = simulate(zero, proj, s, basis, 6);
  CHECK(other.y != y.y);

  // opaque object: every count is clamped to one
  MaterialImage dense = MaterialImage::zeros(shape);
  std::fill(dense.densities.begin(), dense.densities.end(), 1e6);
  SimulationReport rep;
  const Spectrum dim = make_synthetic_spectrum(SpectrumKind::TriangularPair, grid, 10.0);
  const Projector small(Geometry::parallel(shape, 4, 8));
  const EnergySinogram o = simulate(dense, small, dim, basis, 1, &rep);
  CHECK(rep.clamped > 0);
  for (int k = 0; k < 2; ++k)
    for (std::size_t r = 0; r < o.rays(); ++r) {
      CHECK(std::isfinite(o.y[k][r]));
      CHECK(o.weights[k][r] >= 1.0);
    }

  MaterialImage negative = MaterialImage::zeros(shape);
  negative.densities[3] = -1.0;
  CHECK_THROWS_AS(simulate(negative, small, s, basis, 1), ValidationError);
}

TEST_CASE("simulate: Poisson mean and log-domain variance") {
  const EnergyGrid grid = EnergyGrid::diagnostic();
  const MaterialBasis basis = make_synthetic_basis(grid);
  const Spectrum s = make_synthetic_spectrum(SpectrumKind::TriangularPair, grid, 1e5);
  const ImageShape shape{32, 32, 0.2};
  const Projector proj(Geometry::parallel(shape, 100, 100));
  const MaterialImage phantom = make_phantom(random_breast_phantom(3, shape), shape);
  const MaterialSinogram p{100, 100, {proj.forward(phantom.channel(0)), proj.forward(phantom.channel(1))}};
  const auto expected = expected_counts(p, s, basis);
  const EnergySinogram y = simulate(phantom, proj, s, basis, 11);
  for (int k = 0; k < 2; ++k) {
    // standardized residuals: mean ~ 0, variance ~ 1
    double sum_i = 0.0, sum_e = 0.0, z2 = 0.0, ylog2 = 0.0;
    std::vector<double> rel;
    for (std::size_t r = 0; r < y.rays(); ++r) {
      const double e = expected[k][r];
      const double counts = y.weights[k][r];
      sum_i += counts;
      sum_e += e;
      z2 += (counts - e) * (counts - e) / e;
      const double dy = y.y[k][r] + std::log(e / s.i0);
      ylog2 += dy * dy * e;
      rel.push_back(std::abs(counts - e) / e);
    }
    const double n = double(y.rays());
    CHECK(std::abs(sum_i / sum_e - 1.0) <= 0.01);
    CHECK(std::abs(z2 / n - 1.0) <= 0.1);
    CHECK(std::abs(ylog2 / n - 1.0) <= 0.1);
    std::sort(rel.begin(), rel.end());
    CHECK(rel[rel.size() / 2] <= 0.01);
  }
}
