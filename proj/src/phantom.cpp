#include "dualct/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "dualct/error.hpp"
#include "dualct/rng.hpp"

namespace dualct {

MaterialImage make_phantom(const PhantomSpec& spec, ImageShape shape) {
  if (shape.width < 1 || shape.height < 1 || !(shape.pixel_size > 0.0))
    throw ValidationError("phantom image shape is empty");
  for (const Ellipse& e : spec.ellipses) {
    if (!(e.density[0] >= 0.0) || !(e.density[1] >= 0.0))
      throw ValidationError("phantom ellipse has a negative density");
    if (!(e.ax > 0.0) || !(e.ay > 0.0)) throw ValidationError("phantom ellipse axes must be positive");
  }

  MaterialImage img = MaterialImage::zeros(shape);
  const double cx = 0.5 * (shape.width - 1);
  const double cy = 0.5 * (shape.height - 1);
  const std::size_t plane = shape.pixels();
  for (const Ellipse& e : spec.ellipses) {
    const double th = e.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th);
    const double s = std::sin(th);
    for (int j = 0; j < shape.height; ++j) {
      const double y = (j - cy) * shape.pixel_size - e.cy;
      for (int i = 0; i < shape.width; ++i) {
        const double x = (i - cx) * shape.pixel_size - e.cx;
        const double u = (x * c + y * s) / e.ax;
        const double v = (-x * s + y * c) / e.ay;
        if (u * u + v * v <= 1.0) {
          const std::size_t m = static_cast<std::size_t>(j) * shape.width + i;
          img.densities[m] = e.density[0];
          img.densities[plane + m] = e.density[1];
        }
      }
    }
  }
  return img;
}

PhantomSpec parse_phantom_spec(std::istream& in) {
  PhantomSpec spec;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    if (kind != "ellipse") throw ParseError("unknown phantom primitive '" + kind + "'", line_no);
    Ellipse e;
    if (!(fields >> e.cx >> e.cy >> e.ax >> e.ay >> e.rotation_deg >> e.density[0] >> e.density[1]))
      throw ParseError("ellipse needs cx cy ax ay rotation density1 density2", line_no);
    std::string extra;
    if (fields >> extra) throw ParseError("trailing field '" + extra + "'", line_no);
    if (e.density[0] < 0.0 || e.density[1] < 0.0)
      throw ValidationError("negative density on line " + std::to_string(line_no));
    spec.ellipses.push_back(e);
  }
  return spec;
}

PhantomSpec random_breast_phantom(std::uint64_t seed, ImageShape shape) {
  std::mt19937_64 rng(mix64(seed ^ 0x5eedb4ea57ULL));
  auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  const double half = 0.5 * std::min(shape.width, shape.height) * shape.pixel_size;
  constexpr double kAdipose = 950.0;
  constexpr double kGlandular = 1040.0;
  auto mixture = [&](double glandular_fraction) {
    return std::array<double, 2>{kAdipose * (1.0 - glandular_fraction),
                                 kGlandular * glandular_fraction};
  };

  PhantomSpec spec;
  // outline
  const double ax = half * uniform(0.78, 0.92);
  const double ay = half * uniform(0.62, 0.80);
  spec.ellipses.push_back({uniform(-0.03, 0.03) * half, uniform(-0.03, 0.03) * half, ax, ay,
                           uniform(-15.0, 15.0), {kAdipose, 0.0}});
  // fibroglandular region
  const double gx = ax * uniform(0.45, 0.65);
  const double gy = ay * uniform(0.40, 0.60);
  const double gcx = uniform(-0.15, 0.15) * ax;
  const double gcy = uniform(-0.15, 0.15) * ay;
  spec.ellipses.push_back({gcx, gcy, gx, gy, uniform(-30.0, 30.0), mixture(uniform(0.55, 0.8))});
  // fatty inclusions and dense lobules inside the gland
  const int lobules = static_cast<int>(uniform(3.0, 7.0));
  for (int k = 0; k < lobules; ++k) {
    const double r = uniform(0.0, 0.8);
    const double phi = uniform(0.0, 2.0 * std::numbers::pi);
    const bool fatty = uniform(0.0, 1.0) < 0.5;
    spec.ellipses.push_back({gcx + r * gx * std::cos(phi), gcy + r * gy * std::sin(phi),
                             gx * uniform(0.12, 0.3), gy * uniform(0.12, 0.3), uniform(0.0, 180.0),
                             fatty ? mixture(uniform(0.0, 0.15)) : mixture(uniform(0.9, 1.0))});
  }
  // small nodules
  const int nodules = static_cast<int>(uniform(1.0, 4.0));
  for (int k = 0; k < nodules; ++k) {
    const double r = uniform(0.0, 0.7);
    const double phi = uniform(0.0, 2.0 * std::numbers::pi);
    const double rad = half * uniform(0.04, 0.08);
    spec.ellipses.push_back({r * ax * std::cos(phi), r * ay * std::sin(phi), rad, rad, 0.0,
                             {0.0, kGlandular * uniform(1.0, 1.05)}});
  }
  return spec;
}

}  // namespace dualct
