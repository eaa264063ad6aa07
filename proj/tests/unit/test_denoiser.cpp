#include <doctest.h>

#include <cmath>

#include "dualct/denoiser.hpp"
#include "dualct/error.hpp"
#include "test_util.hpp"

using namespace dualct;
using testutil::random_vector;
using testutil::rel_diff;

namespace {

MaterialImage random_image(ImageShape shape, std::uint64_t seed, double scale = 1.0) {
  MaterialImage x = MaterialImage::zeros(shape);
  x.densities = random_vector(x.densities.size(), seed, 0.0, scale);
  return x;
}

// Sum over every output pixel of denoise(x), recorded on a tape.
double taped_sum(const DenoiserParams& rho, const MaterialImage& x, std::vector<double>* grad_rho,
                 std::vector<double>* grad_x) {
  Tape tape;
  const DenoiserVars vars = register_parameters(tape, rho);
  const Tape::Var xv = tape.parameter(x.densities);
  const Tape::Var s = ops::sum(tape, denoise(tape, rho, vars, xv, x.shape));
  tape.backward(s);
  if (grad_rho) *grad_rho = gather_gradient(tape, vars);
  if (grad_x) *grad_x = tape.grad(xv);
  return tape.value(s)[0];
}

double plain_sum(const DenoiserParams& rho, const MaterialImage& x) {
  double s = 0.0;
  for (double v : denoise(rho, x).densities) s += v;
  return s;
}

}  // namespace

TEST_CASE("default architecture and parameter layout") {
  const DenoiserParams rho = DenoiserParams::create(1);
  REQUIRE(rho.layers.size() == 3);
  CHECK(rho.layers[0].in_channels == 2);
  CHECK(rho.layers[0].out_channels == 16);
  CHECK(rho.layers[1].out_channels == 16);
  CHECK(rho.layers[2].out_channels == 2);
  for (const auto& l : rho.layers) CHECK(l.kernel == 3);
  const std::size_t expect = (2 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 2 * 9 + 2);
  CHECK(rho.parameter_count() == expect);
  CHECK(rho.flatten().size() == expect);

  DenoiserParams copy = rho;
  auto flat = random_vector(expect, 3);
  copy.assign(flat);
  CHECK(copy.flatten() == flat);
  CHECK_THROWS_AS(copy.assign(std::vector<double>(5)), DimensionError);

  // same seed, same weights
  CHECK(DenoiserParams::create(1).flatten() == rho.flatten());
  CHECK(DenoiserParams::create(2).flatten() != rho.flatten());
}

TEST_CASE("validation") {
  DenoiserParams rho = DenoiserParams::create(1, {4}, 3);
  CHECK_NOTHROW(rho.validate());
  DenoiserParams bad = rho;
  bad.layers[0].kernel = 2;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = rho;
  bad.layers[1].weight[0] = NAN;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = rho;
  bad.layers[1].in_channels = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = rho;
  bad.channel_scale[1] = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(DenoiserParams::create(1, {4}, 4), ValidationError);

  MaterialImage x = random_image({5, 4, 1.0}, 1);
  x.densities.pop_back();
  CHECK_THROWS_AS(denoise(rho, x), DimensionError);
}

TEST_CASE("zero weights give the identity") {
  DenoiserParams rho = DenoiserParams::create(7, {8, 8}, 3, {900.0, 400.0});
  rho.assign(std::vector<double>(rho.parameter_count(), 0.0));
  const MaterialImage x = random_image({9, 7, 0.5}, 2, 1000.0);
  CHECK(denoise(rho, x).densities == x.densities);
}

TEST_CASE("single linear layer against a direct convolution") {
  DenoiserParams rho;
  ConvLayer layer{2, 2, 3, random_vector(2 * 2 * 9, 4), random_vector(2, 5)};
  rho.layers.push_back(layer);
  rho.channel_scale = {2.0, 0.5};
  rho.validate();
  const ImageShape shape{6, 5, 1.0};
  const MaterialImage x = random_image(shape, 6, 3.0);
  const MaterialImage y = denoise(rho, x);
  const int w = 6, h = 5;
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = layer.bias[o];
        for (int c = 0; c < 2; ++c)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const int ii = i + a - 1, jj = j + b - 1;
              if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
              acc += layer.weight[((o * 2 + c) * 3 + a) * 3 + b] * x.densities[(c * h + ii) * w + jj] /
                     rho.channel_scale[c];
            }
        const std::size_t m = (o * h + i) * w + j;
        CHECK(std::abs(y.densities[m] - (x.densities[m] - rho.channel_scale[o] * acc)) <= 1e-10);
      }
}

TEST_CASE("taped denoiser matches the plain evaluation and finite differences") {
  const DenoiserParams rho = DenoiserParams::create(9, {4, 4}, 3, {3.0, 2.0}, 1.0);
  const MaterialImage x = random_image({5, 6, 1.0}, 10, 4.0);

  std::vector<double> g_rho, g_x;
  const double s = taped_sum(rho, x, &g_rho, &g_x);
  CHECK(s == doctest::Approx(plain_sum(rho, x)).epsilon(1e-12));

  const auto flat = rho.flatten();
  std::vector<double> fd(flat.size());
  const double h = 1e-4;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto up = flat, down = flat;
    up[i] += h;
    down[i] -= h;
    DenoiserParams a = rho, b = rho;
    a.assign(up);
    b.assign(down);
    fd[i] = (plain_sum(a, x) - plain_sum(b, x)) / (2 * h);
  }
  CHECK(rel_diff(g_rho, fd) <= 1e-5);
  // one weight on its own, as a spot check
  CHECK(g_rho[3] == doctest::Approx(fd[3]).epsilon(1e-5));

  std::vector<double> fdx(x.densities.size());
  for (std::size_t i = 0; i < fdx.size(); ++i) {
    MaterialImage a = x, b = x;
    a.densities[i] += h;
    b.densities[i] -= h;
    fdx[i] = (plain_sum(rho, a) - plain_sum(rho, b)) / (2 * h);
  }
  CHECK(rel_diff(g_x, fdx) <= 1e-5);
}

TEST_CASE("persistence round-trips bit for bit") {
  testutil::TempDir dir("denoiser");
  const DenoiserParams rho = DenoiserParams::create(5, {6, 3}, 5, {950.0, 1100.0});
  save_denoiser(dir / "rho", rho);
  const DenoiserParams back = load_denoiser(dir / "rho");
  CHECK(back.flatten() == rho.flatten());
  CHECK(back.channel_scale == rho.channel_scale);
  REQUIRE(back.layers.size() == 3);
  CHECK(back.layers[0].kernel == 5);
  CHECK(back.layers[1].out_channels == 3);
  const MaterialImage x = random_image({8, 8, 0.5}, 1, 900.0);
  CHECK(denoise(back, x).densities == denoise(rho, x).densities);
  CHECK_THROWS(load_denoiser(dir / "missing"));
}
