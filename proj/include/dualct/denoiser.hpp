#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dualct/autodiff.hpp"
#include "dualct/types.hpp"

namespace dualct {

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  std::vector<double> weight;  // [out][in][k][k]
  std::vector<double> bias;    // [out]
};

/// Residual denoiser D(x) = x - N(x), where N is a small CNN noise estimator
/// with ReLU between layers. N sees x divided by a fixed per-material scale
/// and its output is multiplied back, so the weights work in unit range.
struct DenoiserParams {
  std::vector<ConvLayer> layers;
  std::array<double, 2> channel_scale{1.0, 1.0};

  /// 2 -> hidden... -> 2; He-initialized hidden layers, last layer scaled by
  /// `last_layer_gain`.
  static DenoiserParams create(std::uint64_t seed, std::vector<int> hidden = {16, 16}, int kernel = 3,
                               std::array<double, 2> channel_scale = {1.0, 1.0},
                               double last_layer_gain = 0.1);

  std::size_t parameter_count() const;
  /// Weights then bias, layer by layer.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  void validate() const;
};

MaterialImage denoise(const DenoiserParams& rho, const MaterialImage& x);

/// Parameter leaves of one tape, in DenoiserParams::flatten order.
struct DenoiserVars {
  std::vector<Tape::Var> weight;
  std::vector<Tape::Var> bias;
};

DenoiserVars register_parameters(Tape& tape, const DenoiserParams& rho);
/// Collects gradients of the registered leaves in flatten order.
std::vector<double> gather_gradient(const Tape& tape, const DenoiserVars& vars);

Tape::Var denoise(Tape& tape, const DenoiserParams& rho, const DenoiserVars& vars, Tape::Var x,
                  ImageShape shape);

void save_denoiser(const std::filesystem::path& stem, const DenoiserParams& rho);
DenoiserParams load_denoiser(const std::filesystem::path& stem);

}  // namespace dualct
