#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace dualct {

inline constexpr int kMaterials = 2;
inline constexpr int kSources = 2;

struct ImageShape {
  int width = 0;
  int height = 0;
  double pixel_size = 1.0;  // cm

  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
  bool operator==(const ImageShape&) const = default;
};

/// Equivalent densities (mg/cm^3) of the two basis materials. Stored
/// channel-major: the material 1 plane followed by the material 2 plane.
struct MaterialImage {
  ImageShape shape;
  std::vector<double> densities;

  static MaterialImage zeros(ImageShape shape) {
    return {shape, std::vector<double>(2 * shape.pixels(), 0.0)};
  }

  std::span<double> channel(int c) {
    return std::span<double>(densities).subspan(c * shape.pixels(), shape.pixels());
  }
  std::span<const double> channel(int c) const {
    return std::span<const double>(densities).subspan(c * shape.pixels(), shape.pixels());
  }
};

/// Negative-log measurements per ray for the two sources plus their
/// inverse-variance weights. Rays are angle-major.
struct EnergySinogram {
  int n_angles = 0;
  int n_detectors = 0;
  std::array<std::vector<double>, kSources> y;
  std::array<std::vector<double>, kSources> weights;

  std::size_t rays() const { return static_cast<std::size_t>(n_angles) * n_detectors; }

  static EnergySinogram zeros(int n_angles, int n_detectors) {
    const std::size_t n = static_cast<std::size_t>(n_angles) * n_detectors;
    EnergySinogram s{n_angles, n_detectors, {}, {}};
    for (int k = 0; k < kSources; ++k) {
      s.y[k].assign(n, 0.0);
      s.weights[k].assign(n, 1.0);
    }
    return s;
  }
};

/// Material-density line integrals (mg/cm^2) per ray.
struct MaterialSinogram {
  int n_angles = 0;
  int n_detectors = 0;
  std::array<std::vector<double>, kMaterials> p;

  std::size_t rays() const { return static_cast<std::size_t>(n_angles) * n_detectors; }

  static MaterialSinogram zeros(int n_angles, int n_detectors) {
    const std::size_t n = static_cast<std::size_t>(n_angles) * n_detectors;
    MaterialSinogram s{n_angles, n_detectors, {}};
    for (auto& c : s.p) c.assign(n, 0.0);
    return s;
  }
};

}  // namespace dualct
