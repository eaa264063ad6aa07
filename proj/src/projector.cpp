#include "dualct/projector.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <complex>
#include <numbers>

#include "dualct/error.hpp"

namespace dualct {

Geometry Geometry::parallel(ImageShape image, int n_angles, int n_detectors,
                            double detector_spacing) {
  Geometry g;
  g.image = image;
  g.n_angles = n_angles;
  g.n_detectors = n_detectors;
  if (detector_spacing <= 0.0 && n_detectors > 0) {
    const double diagonal = std::hypot(image.width, image.height) * image.pixel_size;
    detector_spacing = diagonal / n_detectors;
  }
  g.detector_spacing = detector_spacing;
  g.angles.resize(std::max(n_angles, 0));
  for (int a = 0; a < n_angles; ++a) g.angles[a] = std::numbers::pi * a / n_angles;
  g.validate();
  return g;
}

void Geometry::validate() const {
  if (n_angles < 1) throw ValidationError("geometry needs at least one angle");
  if (n_detectors < 1) throw ValidationError("geometry needs at least one detector");
  if (image.width < 1 || image.height < 1 || !(image.pixel_size > 0.0))
    throw ValidationError("geometry image shape is empty");
  if (!(detector_spacing > 0.0)) throw ValidationError("detector spacing must be positive");
  if (angles.size() != static_cast<std::size_t>(n_angles))
    throw ValidationError("angle list length differs from n_angles");
  // the array must cover the circle circumscribing the image
  const double diagonal = std::hypot(image.width, image.height) * image.pixel_size;
  if (n_detectors * detector_spacing < diagonal * (1.0 - 1e-9))
    throw ValidationError("detector array does not span the image diagonal");
}

RayModel parse_ray_model(const std::string& name) {
  if (name == "joseph") return RayModel::Joseph;
  if (name == "siddon") return RayModel::Siddon;
  throw ValidationError("unknown ray model '" + name + "'");
}

Projector::Projector(Geometry geometry, RayModel model, std::size_t cache_limit)
    : geometry_(std::move(geometry)), model_(model) {
  geometry_.validate();
  cos_.resize(geometry_.n_angles);
  sin_.resize(geometry_.n_angles);
  for (int a = 0; a < geometry_.n_angles; ++a) {
    cos_[a] = std::cos(geometry_.angles[a]);
    sin_[a] = std::sin(geometry_.angles[a]);
  }
  // a ray meets at most 2 (w + h) pixels
  const std::size_t bound =
      geometry_.rays() * 2 * std::size_t(geometry_.image.width + geometry_.image.height);
  if (bound <= cache_limit && geometry_.image.pixels() <= UINT32_MAX) {
    auto rows = std::make_shared<Rows>();
    const std::size_t n = geometry_.rays();
    rows->start.reserve(n + 1);
    rows->start.push_back(0);
    for (std::size_t r = 0; r < n; ++r) {
      trace(r, [&](std::size_t m, double w) {
        rows->pixel.push_back(static_cast<std::uint32_t>(m));
        rows->weight.push_back(w);
      });
      rows->start.push_back(rows->pixel.size());
    }
    rows->pixel.shrink_to_fit();
    rows->weight.shrink_to_fit();
    rows_ = std::move(rows);
  }
}

void Projector::forward(std::span<const double> image, std::span<double> sinogram) const {
  if (image.size() != geometry_.image.pixels())
    throw DimensionError("forward_project: image size does not match geometry");
  if (sinogram.size() != geometry_.rays())
    throw DimensionError("forward_project: sinogram size does not match geometry");
  const std::size_t rays = geometry_.rays();
  if (rows_) {
    const Rows& a = *rows_;
    for (std::size_t r = 0; r < rays; ++r) {
      double sum = 0.0;
      for (std::size_t e = a.start[r]; e < a.start[r + 1]; ++e) sum += a.weight[e] * image[a.pixel[e]];
      sinogram[r] = sum;
    }
    return;
  }
  for (std::size_t r = 0; r < rays; ++r) {
    double sum = 0.0;
    trace(r, [&](std::size_t m, double w) { sum += w * image[m]; });
    sinogram[r] = sum;
  }
}

void Projector::back(std::span<const double> sinogram, std::span<double> image) const {
  if (image.size() != geometry_.image.pixels())
    throw DimensionError("back_project: image size does not match geometry");
  if (sinogram.size() != geometry_.rays())
    throw DimensionError("back_project: sinogram size does not match geometry");
  std::fill(image.begin(), image.end(), 0.0);
  const std::size_t rays = geometry_.rays();
  if (rows_) {
    const Rows& a = *rows_;
    for (std::size_t r = 0; r < rays; ++r) {
      const double v = sinogram[r];
      if (v == 0.0) continue;
      for (std::size_t e = a.start[r]; e < a.start[r + 1]; ++e) image[a.pixel[e]] += a.weight[e] * v;
    }
    return;
  }
  for (std::size_t r = 0; r < rays; ++r) {
    const double v = sinogram[r];
    if (v == 0.0) continue;
    trace(r, [&](std::size_t m, double w) { image[m] += w * v; });
  }
}

std::vector<double> Projector::forward(std::span<const double> image) const {
  std::vector<double> out(geometry_.rays());
  forward(image, out);
  return out;
}

std::vector<double> Projector::back(std::span<const double> sinogram) const {
  std::vector<double> out(geometry_.image.pixels());
  back(sinogram, out);
  return out;
}

FbpFilter parse_fbp_filter(const std::string& name) {
  if (name == "ram-lak") return FbpFilter::RamLak;
  if (name == "hann") return FbpFilter::Hann;
  throw ValidationError("unknown FBP filter '" + name + "'");
}

namespace {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Frequency response of the band-limited ramp, built from its sampled
// spatial kernel so the zero-frequency term is not lost.
std::vector<double> ramp_response(std::size_t padded, double spacing, FbpFilter filter) {
  std::vector<std::complex<double>> kernel(padded);
  const auto half = static_cast<long>(padded / 2);
  for (long k = -half; k < half; ++k) {
    double h = 0.0;
    if (k == 0)
      h = 1.0 / (4.0 * spacing * spacing);
    else if (k % 2 != 0)
      h = -1.0 / (std::numbers::pi * std::numbers::pi * double(k) * k * spacing * spacing);
    kernel[(k + static_cast<long>(padded)) % padded] = h;
  }
  auto* buf = reinterpret_cast<fftw_complex*>(kernel.data());
  fftw_plan plan = fftw_plan_dft_1d(static_cast<int>(padded), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);

  std::vector<double> response(padded);
  for (std::size_t f = 0; f < padded; ++f) {
    double r = kernel[f].real();
    if (filter == FbpFilter::Hann) {
      const double nu = std::min(f, padded - f) / double(padded);  // cycles/sample, <= 0.5
      r *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * nu));
    }
    response[f] = r;
  }
  return response;
}

}  // namespace

std::vector<double> fbp(const Projector& projector, std::span<const double> sinogram,
                        FbpFilter filter) {
  const Geometry& g = projector.geometry();
  if (g.n_angles < 2) throw InsufficientDataError("fbp needs at least two angles");
  if (sinogram.size() != g.rays()) throw DimensionError("fbp: sinogram size does not match geometry");

  const std::size_t n_det = g.n_detectors;
  const std::size_t padded = next_pow2(2 * n_det);
  const std::vector<double> response = ramp_response(padded, g.detector_spacing, filter);

  std::vector<std::complex<double>> row(padded);
  auto* buf = reinterpret_cast<fftw_complex*>(row.data());
  fftw_plan fwd = fftw_plan_dft_1d(static_cast<int>(padded), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_plan inv = fftw_plan_dft_1d(static_cast<int>(padded), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);

  // convolution integral: sum * spacing; FFTW's inverse is unnormalized
  const double conv_scale = g.detector_spacing / double(padded);
  std::vector<double> filtered(g.rays());
  for (int a = 0; a < g.n_angles; ++a) {
    std::fill(row.begin(), row.end(), std::complex<double>{});
    for (std::size_t d = 0; d < n_det; ++d) row[d] = sinogram[a * n_det + d];
    fftw_execute(fwd);
    for (std::size_t f = 0; f < padded; ++f) row[f] *= response[f];
    fftw_execute(inv);
    for (std::size_t d = 0; d < n_det; ++d) filtered[a * n_det + d] = row[d].real() * conv_scale;
  }
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);

  std::vector<double> image = projector.back(filtered);
  // A^T sums pixel^2 / spacing of weight per angle; fold that and d(theta) in
  const double pixel = g.image.pixel_size;
  const double scale = std::numbers::pi / g.n_angles * g.detector_spacing / (pixel * pixel);
  for (double& v : image) v *= scale;
  return image;
}

}  // namespace dualct
