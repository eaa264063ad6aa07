#include "dualct/io.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dualct/error.hpp"

namespace dualct {

namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) out = (out << 8) | ((v >> (8 * b)) & 0xff);
    return out;
  }
}

}  // namespace

void write_raw(const std::filesystem::path& path, std::span<const double> values, RawType type) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  if (type == RawType::Float32) {
    std::vector<std::uint32_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      buf[i] = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  } else {
    std::vector<std::uint64_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      buf[i] = to_little(std::bit_cast<std::uint64_t>(values[i]));
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 8));
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<double> read_raw(const std::filesystem::path& path, RawType type, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::size_t width = type == RawType::Float32 ? 4 : 8;
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes != expected * width)
    throw DimensionError("'" + path.string() + "' holds " + std::to_string(bytes) +
                         " bytes, expected " + std::to_string(expected * width));
  std::vector<double> values(expected);
  if (type == RawType::Float32) {
    std::vector<std::uint32_t> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(bytes));
    for (std::size_t i = 0; i < expected; ++i) values[i] = std::bit_cast<float>(to_little(buf[i]));
  } else {
    std::vector<std::uint64_t> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(bytes));
    for (std::size_t i = 0; i < expected; ++i) values[i] = std::bit_cast<double>(to_little(buf[i]));
  }
  if (!in) throw IoError("failed reading '" + path.string() + "'");
  return values;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void Header::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

void Header::set(const std::string& key, double value) { set(key, format_double(value)); }
void Header::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

bool Header::has(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return true;
  return false;
}

const std::string& Header::get(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return e.second;
  throw ParseError("header is missing key '" + key + "'", 0);
}

double Header::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw ParseError("header key '" + key + "' is not a number: '" + s + "'", 0);
  }
}

long long Header::get_int(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("header key '" + key + "' is not an integer: '" + s + "'", 0);
  }
}

void Header::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : entries_) out << k << ' ' << v << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Header Header::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  Header h;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0) throw ParseError("malformed header line in '" + path.string() + "'", line_no);
    h.entries_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return h;
}

std::filesystem::path header_path(const std::filesystem::path& stem) {
  return std::filesystem::path(stem.string() + ".hdr");
}

std::filesystem::path payload_path(const std::filesystem::path& stem, const char* extension) {
  return std::filesystem::path(stem.string() + extension);
}

void save_image(const std::filesystem::path& stem, const MaterialImage& image) {
  if (image.densities.size() != 2 * image.shape.pixels())
    throw DimensionError("material image buffer does not match its shape");
  Header h;
  h.set("format", std::string("dualct-material-image"));
  h.set("width", static_cast<long long>(image.shape.width));
  h.set("height", static_cast<long long>(image.shape.height));
  h.set("pixel_size", image.shape.pixel_size);
  h.set("channels", 2LL);
  h.set("dtype", std::string("float32-le channel-major"));
  h.save(header_path(stem));
  write_raw(payload_path(stem), image.densities, RawType::Float32);
}

MaterialImage load_image(const std::filesystem::path& stem) {
  const Header h = Header::load(header_path(stem));
  MaterialImage img;
  img.shape.width = static_cast<int>(h.get_int("width"));
  img.shape.height = static_cast<int>(h.get_int("height"));
  img.shape.pixel_size = h.get_double("pixel_size");
  if (img.shape.width < 1 || img.shape.height < 1 || !(img.shape.pixel_size > 0.0))
    throw ParseError("image header has an empty shape", 0);
  img.densities = read_raw(payload_path(stem), RawType::Float32, 2 * img.shape.pixels());
  return img;
}

void save_sinogram(const std::filesystem::path& stem, const EnergySinogram& s,
                   double detector_spacing, double i0) {
  const std::size_t n = s.rays();
  std::vector<double> planes;
  planes.reserve(4 * n);
  for (int k = 0; k < kSources; ++k) {
    if (s.y[k].size() != n || s.weights[k].size() != n)
      throw DimensionError("energy sinogram channel does not match its geometry");
  }
  for (int k = 0; k < kSources; ++k) planes.insert(planes.end(), s.y[k].begin(), s.y[k].end());
  for (int k = 0; k < kSources; ++k) planes.insert(planes.end(), s.weights[k].begin(), s.weights[k].end());
  Header h;
  h.set("format", std::string("dualct-energy-sinogram"));
  h.set("n_angles", static_cast<long long>(s.n_angles));
  h.set("n_detectors", static_cast<long long>(s.n_detectors));
  h.set("spacing", detector_spacing);
  h.set("i0", i0);
  h.set("planes", std::string("y1 y2 w1 w2"));
  h.set("dtype", std::string("float32-le angle-major"));
  h.save(header_path(stem));
  write_raw(payload_path(stem), planes, RawType::Float32);
}

EnergySinogram load_sinogram(const std::filesystem::path& stem, double* detector_spacing, double* i0) {
  const Header h = Header::load(header_path(stem));
  EnergySinogram s;
  s.n_angles = static_cast<int>(h.get_int("n_angles"));
  s.n_detectors = static_cast<int>(h.get_int("n_detectors"));
  if (s.n_angles < 1 || s.n_detectors < 1) throw ParseError("sinogram header has an empty shape", 0);
  if (detector_spacing) *detector_spacing = h.get_double("spacing");
  if (i0) *i0 = h.get_double("i0");
  const std::size_t n = s.rays();
  const std::vector<double> planes = read_raw(payload_path(stem), RawType::Float32, 4 * n);
  for (int k = 0; k < kSources; ++k) {
    s.y[k].assign(planes.begin() + k * n, planes.begin() + (k + 1) * n);
    s.weights[k].assign(planes.begin() + (2 + k) * n, planes.begin() + (3 + k) * n);
  }
  return s;
}

void save_channel_sinogram(const std::filesystem::path& stem, std::span<const double> values,
                           int n_angles, int n_detectors, double detector_spacing) {
  if (values.size() != static_cast<std::size_t>(n_angles) * n_detectors)
    throw DimensionError("sinogram buffer does not match its geometry");
  Header h;
  h.set("format", std::string("dualct-sinogram"));
  h.set("n_angles", static_cast<long long>(n_angles));
  h.set("n_detectors", static_cast<long long>(n_detectors));
  h.set("spacing", detector_spacing);
  h.set("dtype", std::string("float32-le angle-major"));
  h.save(header_path(stem));
  write_raw(payload_path(stem), values, RawType::Float32);
}

}  // namespace dualct
