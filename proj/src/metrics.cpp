#include "dualct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dualct/error.hpp"

namespace dualct {

double psnr(std::span<const double> truth, std::span<const double> estimate) {
  if (truth.size() != estimate.size()) throw DimensionError("psnr: truth and estimate differ in size");
  if (truth.empty()) throw DimensionError("psnr: empty images");
  double sq = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = estimate[i] - truth[i];
    sq += d * d;
  }
  if (sq == 0.0) return std::numeric_limits<double>::infinity();
  const double peak = *std::max_element(truth.begin(), truth.end());
  const double mse = sq / double(truth.size());
  return 10.0 * std::log10(peak * peak / mse);
}

MaterialPsnr material_psnr(const MaterialImage& truth, const MaterialImage& estimate) {
  if (!(truth.shape == estimate.shape) || truth.densities.size() != estimate.densities.size())
    throw DimensionError("psnr: reconstruction shape differs from the truth");
  MaterialPsnr out;
  for (int c = 0; c < 2; ++c) out.channel[c] = psnr(truth.channel(c), estimate.channel(c));
  out.mean = 0.5 * (out.channel[0] + out.channel[1]);
  return out;
}

}  // namespace dualct
