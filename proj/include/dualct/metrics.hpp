#pragma once

#include <array>
#include <span>

#include "dualct/types.hpp"

namespace dualct {

/// 10 log10(peak^2 / MSE) with peak = max(truth). +inf when identical.
double psnr(std::span<const double> truth, std::span<const double> estimate);

struct MaterialPsnr {
  std::array<double, 2> channel{0.0, 0.0};
  double mean = 0.0;  // mean of the two channel values
};

/// Per-material PSNR, each channel normalized by its own truth maximum.
MaterialPsnr material_psnr(const MaterialImage& truth, const MaterialImage& estimate);

}  // namespace dualct
