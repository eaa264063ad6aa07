#pragma once

// Ray traversal templates shared by Projector::forward and Projector::back.

#include <algorithm>
#include <cmath>
#include <vector>

namespace dualct {

template <typename Visitor>
void Projector::trace(std::size_t ray, Visitor&& visit) const {
  const int angle = static_cast<int>(ray / geometry_.n_detectors);
  const int detector = static_cast<int>(ray % geometry_.n_detectors);
  if (model_ == RayModel::Joseph)
    trace_joseph(angle, detector, visit);
  else
    trace_siddon(angle, detector, visit);
}

// Linear interpolation between pixel centres, one sample per row (or column)
// crossed, each sample weighted by the path length through that row.
template <typename Visitor>
void Projector::trace_joseph(int angle, int detector, Visitor&& visit) const {
  const ImageShape& img = geometry_.image;
  const double pixel = img.pixel_size;
  const double c = cos_[angle];
  const double s = sin_[angle];
  const double t = geometry_.detector_offset(detector);
  const double cx = 0.5 * (img.width - 1);
  const double cy = 0.5 * (img.height - 1);

  if (std::abs(c) >= std::abs(s)) {
    const double step = pixel / std::abs(c);
    for (int j = 0; j < img.height; ++j) {
      const double y = (j - cy) * pixel;
      const double u = (t - y * s) / c / pixel + cx;
      const double fl = std::floor(u);
      if (fl < -1.0 || fl >= img.width) continue;
      const int i = static_cast<int>(fl);
      const double f = u - fl;
      const std::size_t row = static_cast<std::size_t>(j) * img.width;
      if (i >= 0 && f < 1.0) visit(row + i, (1.0 - f) * step);
      if (i + 1 < img.width && f > 0.0) visit(row + i + 1, f * step);
    }
  } else {
    const double step = pixel / std::abs(s);
    for (int i = 0; i < img.width; ++i) {
      const double x = (i - cx) * pixel;
      const double v = (t - x * c) / s / pixel + cy;
      const double fl = std::floor(v);
      if (fl < -1.0 || fl >= img.height) continue;
      const int j = static_cast<int>(fl);
      const double f = v - fl;
      if (j >= 0 && f < 1.0) visit(static_cast<std::size_t>(j) * img.width + i, (1.0 - f) * step);
      if (j + 1 < img.height && f > 0.0)
        visit(static_cast<std::size_t>(j + 1) * img.width + i, f * step);
    }
  }
}

// Exact intersection lengths of the ray with each pixel square.
template <typename Visitor>
void Projector::trace_siddon(int angle, int detector, Visitor&& visit) const {
  const ImageShape& img = geometry_.image;
  const double pixel = img.pixel_size;
  const double c = cos_[angle];
  const double s = sin_[angle];
  const double t = geometry_.detector_offset(detector);
  const double x0 = t * c;
  const double y0 = t * s;
  const double dx = -s;
  const double dy = c;
  const double xmin = -0.5 * img.width * pixel;
  const double ymin = -0.5 * img.height * pixel;
  const double xmax = -xmin;
  const double ymax = -ymin;
  constexpr double kTiny = 1e-14;

  double a_lo = -1e300;
  double a_hi = 1e300;
  if (std::abs(dx) > kTiny) {
    const double a1 = (xmin - x0) / dx;
    const double a2 = (xmax - x0) / dx;
    a_lo = std::max(a_lo, std::min(a1, a2));
    a_hi = std::min(a_hi, std::max(a1, a2));
  } else if (x0 <= xmin || x0 >= xmax) {
    return;
  }
  if (std::abs(dy) > kTiny) {
    const double a1 = (ymin - y0) / dy;
    const double a2 = (ymax - y0) / dy;
    a_lo = std::max(a_lo, std::min(a1, a2));
    a_hi = std::min(a_hi, std::max(a1, a2));
  } else if (y0 <= ymin || y0 >= ymax) {
    return;
  }
  if (a_hi <= a_lo) return;

  thread_local std::vector<double> ax, ay, alphas;
  ax.clear();
  ay.clear();
  if (std::abs(dx) > kTiny) {
    for (int k = 0; k <= img.width; ++k) {
      const double a = (xmin + k * pixel - x0) / dx;
      if (a > a_lo && a < a_hi) ax.push_back(a);
    }
    if (dx < 0) std::reverse(ax.begin(), ax.end());
  }
  if (std::abs(dy) > kTiny) {
    for (int k = 0; k <= img.height; ++k) {
      const double a = (ymin + k * pixel - y0) / dy;
      if (a > a_lo && a < a_hi) ay.push_back(a);
    }
    if (dy < 0) std::reverse(ay.begin(), ay.end());
  }
  alphas.clear();
  alphas.push_back(a_lo);
  std::merge(ax.begin(), ax.end(), ay.begin(), ay.end(), std::back_inserter(alphas));
  alphas.push_back(a_hi);

  for (std::size_t k = 0; k + 1 < alphas.size(); ++k) {
    const double len = alphas[k + 1] - alphas[k];
    if (len <= 0.0) continue;
    const double am = 0.5 * (alphas[k] + alphas[k + 1]);
    const int i = static_cast<int>(std::floor((x0 + am * dx - xmin) / pixel));
    const int j = static_cast<int>(std::floor((y0 + am * dy - ymin) / pixel));
    if (i < 0 || i >= img.width || j < 0 || j >= img.height) continue;
    visit(static_cast<std::size_t>(j) * img.width + i, len);
  }
}

}  // namespace dualct
