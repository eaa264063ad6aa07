#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dualct/types.hpp"

namespace dualct {

/// Parallel-beam scan geometry. Angles are uniform over [0, pi); detector
/// d sits at offset (d - (n_detectors - 1) / 2) * detector_spacing from the
/// rotation centre, which coincides with the image centre.
struct Geometry {
  ImageShape image;
  int n_angles = 0;
  int n_detectors = 1024;
  double detector_spacing = 0.0;  // cm
  std::vector<double> angles;     // radians

  /// detector_spacing <= 0 picks the spacing at which the array spans the
  /// image diagonal.
  static Geometry parallel(ImageShape image, int n_angles, int n_detectors = 1024,
                           double detector_spacing = 0.0);

  std::size_t rays() const { return static_cast<std::size_t>(n_angles) * n_detectors; }
  double detector_offset(int d) const {
    return (d - 0.5 * (n_detectors - 1)) * detector_spacing;
  }
  /// Throws ValidationError on a malformed geometry.
  void validate() const;
};

enum class RayModel { Joseph, Siddon };
RayModel parse_ray_model(const std::string& name);

/// The system matrix A with [A]_{n,m} the weight of pixel m along ray n,
/// and its exact transpose. Both directions walk the same traversal; when
/// A has at most `cache_limit` nonzeros its rows are recorded once from
/// that traversal and replayed.
class Projector {
 public:
  static constexpr std::size_t kDefaultCacheLimit = std::size_t(1) << 24;

  explicit Projector(Geometry geometry, RayModel model = RayModel::Joseph,
                     std::size_t cache_limit = kDefaultCacheLimit);

  const Geometry& geometry() const { return geometry_; }
  RayModel model() const { return model_; }

  void forward(std::span<const double> image, std::span<double> sinogram) const;
  void back(std::span<const double> sinogram, std::span<double> image) const;

  std::vector<double> forward(std::span<const double> image) const;
  std::vector<double> back(std::span<const double> sinogram) const;

  /// Visits (pixel index, weight) for every nonzero entry of row `ray`.
  template <typename Visitor>
  void trace(std::size_t ray, Visitor&& visit) const;

 private:
  template <typename Visitor>
  void trace_joseph(int angle, int detector, Visitor&& visit) const;
  template <typename Visitor>
  void trace_siddon(int angle, int detector, Visitor&& visit) const;

  struct Rows {
    std::vector<std::size_t> start;  // rays + 1
    std::vector<std::uint32_t> pixel;
    std::vector<double> weight;
  };

  Geometry geometry_;
  RayModel model_;
  std::vector<double> cos_;
  std::vector<double> sin_;
  std::shared_ptr<const Rows> rows_;
};

enum class FbpFilter { RamLak, Hann };
FbpFilter parse_fbp_filter(const std::string& name);

/// Ramp-filters each projection in the frequency domain and back-projects,
/// normalized so that a unit-density object reconstructs to unit density.
std::vector<double> fbp(const Projector& projector, std::span<const double> sinogram,
                        FbpFilter filter = FbpFilter::RamLak);

}  // namespace dualct

#include "dualct/projector_trace.hpp"
