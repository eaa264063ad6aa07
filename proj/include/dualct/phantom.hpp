#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <vector>

#include "dualct/types.hpp"

namespace dualct {

/// Ellipse in physical units (cm, degrees) centred on the image origin.
struct Ellipse {
  double cx = 0.0;
  double cy = 0.0;
  double ax = 1.0;
  double ay = 1.0;
  double rotation_deg = 0.0;
  std::array<double, 2> density{0.0, 0.0};  // mg/cm^3
};

struct PhantomSpec {
  std::vector<Ellipse> ellipses;
};

/// Rasterizes by pixel-centre membership. Later ellipses overwrite earlier
/// ones; uncovered pixels are zero. Throws ValidationError on a negative
/// density or a non-positive axis.
MaterialImage make_phantom(const PhantomSpec& spec, ImageShape shape);

/// Text form: one `ellipse cx cy ax ay rotation_deg density1 density2` per
/// line, '#' comments.
PhantomSpec parse_phantom_spec(std::istream& in);

/// Breast-like cross-section: an adipose outline holding a fibroglandular
/// region with fatty inclusions and a few dense nodules.
PhantomSpec random_breast_phantom(std::uint64_t seed, ImageShape shape);

}  // namespace dualct
