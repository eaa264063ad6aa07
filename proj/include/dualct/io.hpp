#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualct/types.hpp"

namespace dualct {

enum class RawType { Float32, Float64 };

/// Little-endian IEEE-754 values, regardless of host byte order.
void write_raw(const std::filesystem::path& path, std::span<const double> values, RawType type);
std::vector<double> read_raw(const std::filesystem::path& path, RawType type, std::size_t expected);

/// Ordered `key value...` lines; order is preserved so output is stable.
class Header {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;

  void save(const std::filesystem::path& path) const;
  static Header load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Path of the header (`<stem>.hdr`) and payload (`<stem>.raw`) files.
std::filesystem::path header_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem, const char* extension = ".raw");

/// float32, channel-major, with a width/height/pixel_size sidecar.
void save_image(const std::filesystem::path& stem, const MaterialImage& image);
MaterialImage load_image(const std::filesystem::path& stem);

/// float32 planes y1, y2, w1, w2, each angle-major.
void save_sinogram(const std::filesystem::path& stem, const EnergySinogram& sinogram,
                   double detector_spacing, double i0);
EnergySinogram load_sinogram(const std::filesystem::path& stem, double* detector_spacing = nullptr,
                             double* i0 = nullptr);

/// Single-channel float32 sinogram, angle-major.
void save_channel_sinogram(const std::filesystem::path& stem, std::span<const double> values,
                           int n_angles, int n_detectors, double detector_spacing);

std::string format_double(double v);

}  // namespace dualct
