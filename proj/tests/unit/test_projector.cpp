#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "dualct/error.hpp"
#include "dualct/metrics.hpp"
#include "dualct/phantom.hpp"
#include "dualct/projector.hpp"
#include "test_util.hpp"

using namespace dualct;

namespace {

double adjoint_defect(const Projector& p, std::uint64_t seed) {
  const auto x = testutil::random_vector(p.geometry().image.pixels(), seed);
  const auto y = testutil::random_vector(p.geometry().rays(), seed + 1000);
  const auto ax = p.forward(x);
  const auto aty = p.back(y);
  return std::abs(testutil::dot(ax, y) - testutil::dot(x, aty)) / (testutil::norm(ax) * testutil::norm(y));
}

MaterialImage disc(ImageShape shape, double r) {
  PhantomSpec spec;
  spec.ellipses.push_back({0.0, 0.0, r, r, 0.0, {1.0, 0.0}});
  return make_phantom(spec, shape);
}

}  // namespace

TEST_CASE("geometry defaults and validation") {
  const Geometry g = Geometry::parallel({64, 64, 0.2}, 30);
  CHECK(g.n_detectors == 1024);
  CHECK(g.n_detectors * g.detector_spacing == doctest::Approx(std::hypot(64.0, 64.0) * 0.2));
  CHECK(g.angles.front() == 0.0);
  CHECK(g.angles.back() < M_PI);
  CHECK(g.angles[1] == doctest::Approx(M_PI / 30));
  CHECK_THROWS_AS(Geometry::parallel({64, 64, 0.2}, 0), ValidationError);
  CHECK_THROWS_AS(Geometry::parallel({64, 64, 0.2}, 10, 0), ValidationError);
  CHECK_THROWS_AS(Geometry::parallel({64, 64, 0.2}, 10, 64, 0.1), ValidationError);
  CHECK(parse_ray_model("siddon") == RayModel::Siddon);
  CHECK_THROWS_AS(parse_ray_model("fan"), ValidationError);
}

TEST_CASE("zero in, zero out") {
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector p(Geometry::parallel({16, 16, 0.1}, 12, 32), model);
    const auto s = p.forward(std::vector<double>(256, 0.0));
    CHECK(std::all_of(s.begin(), s.end(), [](double v) { return v == 0.0; }));
    const auto b = p.back(std::vector<double>(p.geometry().rays(), 0.0));
    CHECK(std::all_of(b.begin(), b.end(), [](double v) { return v == 0.0; }));
    const auto f = fbp(p, std::vector<double>(p.geometry().rays(), 0.0));
    CHECK(std::all_of(f.begin(), f.end(), [](double v) { return v == 0.0; }));
  }
}

TEST_CASE("central chord of a disc") {
  const ImageShape shape{256, 256, 1.0 / 128};
  const double r = 0.6;
  const MaterialImage img = disc(shape, r);
  // odd detector count puts a detector on the rotation centre
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector p(Geometry::parallel(shape, 8, 401), model);
    const auto s = p.forward(img.channel(0));
    for (int a = 0; a < 8; ++a) CHECK(std::abs(s[a * 401 + 200] - 2 * r) / (2 * r) <= 0.015);
  }
}

TEST_CASE("point support follows the sinusoid") {
  const ImageShape shape{32, 32, 0.1};
  std::vector<double> img(shape.pixels(), 0.0);
  const int pi = 23, pj = 9;
  img[pj * 32 + pi] = 1.0;
  const double x = (pi - 15.5) * 0.1, y = (pj - 15.5) * 0.1;
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector p(Geometry::parallel(shape, 24, 64), model);
    const Geometry& g = p.geometry();
    const auto s = p.forward(img);
    for (int a = 0; a < g.n_angles; ++a) {
      const double t = x * std::cos(g.angles[a]) + y * std::sin(g.angles[a]);
      bool any = false;
      for (int d = 0; d < g.n_detectors; ++d) {
        const double v = s[a * g.n_detectors + d];
        if (v != 0.0) {
          any = true;
          // a pixel's shadow is at most half its diagonal from t, plus one
          // interpolation cell for Joseph
          CHECK(std::abs(g.detector_offset(d) - t) <= 0.1 * (std::sqrt(0.5) + 1.0) + 1e-12);
        }
      }
      CHECK(any);
    }
  }
}

TEST_CASE("back projection is the exact adjoint") {
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector a(Geometry::parallel({32, 32, 0.1}, 12, 48), model);
    const Projector b(Geometry::parallel({64, 64, 0.05}, 30, 96), model);
    const Projector c(Geometry::parallel({20, 13, 0.3}, 7, 33), model);
    for (std::uint64_t k = 0; k < 20; ++k) {
      CHECK(adjoint_defect(a, k) <= 1e-6);
      CHECK(adjoint_defect(b, k) <= 1e-6);
      CHECK(adjoint_defect(c, k) <= 1e-6);
    }
  }
}

TEST_CASE("one-hot sinogram back-projects to the ray footprint") {
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector p(Geometry::parallel({16, 16, 0.1}, 10, 24), model, 0);  // uncached traversal
    const Projector cached(p.geometry(), model);
    for (std::size_t ray : {std::size_t(5), std::size_t(37), std::size_t(131), std::size_t(239)}) {
      std::vector<double> e(p.geometry().rays(), 0.0);
      e[ray] = 1.0;
      std::vector<double> footprint(256, 0.0);
      p.trace(ray, [&](std::size_t m, double w) { footprint[m] += w; });
      CHECK(p.back(e) == footprint);
      const auto via_cache = cached.back(e);
      for (std::size_t m = 0; m < 256; ++m) CHECK(via_cache[m] == doctest::Approx(footprint[m]).epsilon(1e-14));
    }
  }
}

TEST_CASE("forward projection is linear") {
  const Projector p(Geometry::parallel({24, 24, 0.1}, 15, 40));
  const auto x = testutil::random_vector(576, 1);
  const auto z = testutil::random_vector(576, 2);
  const double alpha = 1.7, beta = -0.3;
  std::vector<double> combo(576);
  for (std::size_t m = 0; m < 576; ++m) combo[m] = alpha * x[m] + beta * z[m];
  const auto ax = p.forward(x), az = p.forward(z), ac = p.forward(combo);
  std::vector<double> want(ax.size());
  for (std::size_t r = 0; r < ax.size(); ++r) want[r] = alpha * ax[r] + beta * az[r];
  CHECK(testutil::rel_diff(ac, want) <= 1e-12);
}

TEST_CASE("rotating the image by 90 degrees permutes the sinogram") {
  const int n = 32, angles = 16, dets = 48;
  const MaterialImage img = make_phantom(random_breast_phantom(4, {n, n, 0.1}), {n, n, 0.1});
  const auto base = img.channel(0);
  std::vector<double> rot(base.size());
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) rot[i * n + (n - 1 - j)] = base[j * n + i];
  for (auto model : {RayModel::Joseph, RayModel::Siddon}) {
    const Projector p(Geometry::parallel({n, n, 0.1}, angles, dets), model);
    const auto s = p.forward(std::vector<double>(base.begin(), base.end()));
    const auto sr = p.forward(rot);
    // rotated view at theta equals the original at theta - 90 degrees
    std::vector<double> want(sr.size());
    for (int a = 0; a < angles; ++a)
      for (int d = 0; d < dets; ++d)
        want[a * dets + d] = a >= angles / 2 ? s[(a - angles / 2) * dets + d]
                                              : s[(a + angles / 2) * dets + (dets - 1 - d)];
    CHECK(testutil::rel_diff(sr, want) <= 1e-3);
  }
}

TEST_CASE("fbp reconstructs a disc and improves with more angles") {
  const ImageShape shape{256, 256, 1.0 / 128};
  const MaterialImage img = disc(shape, 0.6);
  const std::vector<double> truth(img.channel(0).begin(), img.channel(0).end());
  const Projector full(Geometry::parallel(shape, 512, 400));
  const auto rec = fbp(full, full.forward(truth));
  CHECK(psnr(truth, rec) >= 30.0);
  // unit density in the interior
  CHECK(rec[128 * 256 + 128] == doctest::Approx(1.0).epsilon(0.02));

  const ImageShape small{64, 64, 0.2};
  const MaterialImage ph = make_phantom(random_breast_phantom(2, small), small);
  const std::vector<double> t2(ph.channel(0).begin(), ph.channel(0).end());
  std::map<int, double> quality;
  for (int a : {30, 180}) {
    const Projector p(Geometry::parallel(small, a, 96));
    for (auto filter : {FbpFilter::RamLak, FbpFilter::Hann}) {
      const double q = psnr(t2, fbp(p, p.forward(t2), filter));
      quality[a * 10 + int(filter)] = q;
    }
  }
  CHECK(quality[300] < quality[1800]);
  CHECK(quality[301] < quality[1801]);
}

TEST_CASE("fbp and projector errors") {
  const Projector one(Geometry::parallel({16, 16, 0.1}, 1, 32));
  CHECK_THROWS_AS(fbp(one, std::vector<double>(32, 0.0)), InsufficientDataError);
  const Projector p(Geometry::parallel({16, 16, 0.1}, 4, 32));
  CHECK_THROWS_AS(p.forward(std::vector<double>(10, 0.0)), DimensionError);
  CHECK_THROWS_AS(p.back(std::vector<double>(10, 0.0)), DimensionError);
  CHECK_THROWS_AS(fbp(p, std::vector<double>(10, 0.0)), DimensionError);
  CHECK(parse_fbp_filter("hann") == FbpFilter::Hann);
  CHECK_THROWS_AS(parse_fbp_filter("shepp"), ValidationError);
}
