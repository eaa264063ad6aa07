#include "dualct/denoiser.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "dualct/error.hpp"
#include "dualct/io.hpp"
#include "dualct/rng.hpp"

namespace dualct {

DenoiserParams DenoiserParams::create(std::uint64_t seed, std::vector<int> hidden, int kernel,
                                      std::array<double, 2> channel_scale, double last_layer_gain) {
  DenoiserParams rho;
  rho.channel_scale = channel_scale;
  std::mt19937_64 rng(mix64(seed ^ 0xde40153ULL));
  std::vector<int> widths{2};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    ConvLayer layer{widths[l], widths[l + 1], kernel, {}, {}};
    const double fan_in = double(layer.in_channels) * kernel * kernel;
    const bool last = l + 2 == widths.size();
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in) * (last ? last_layer_gain : 1.0));
    layer.weight.resize(std::size_t(layer.out_channels) * layer.in_channels * kernel * kernel);
    for (double& w : layer.weight) w = dist(rng);
    layer.bias.assign(layer.out_channels, 0.0);
    rho.layers.push_back(std::move(layer));
  }
  rho.validate();
  return rho;
}

std::size_t DenoiserParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> DenoiserParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& l : layers) {
    flat.insert(flat.end(), l.weight.begin(), l.weight.end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

void DenoiserParams::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw DimensionError("denoiser: flat parameter size mismatch");
  std::size_t pos = 0;
  for (auto& l : layers) {
    std::copy_n(flat.begin() + pos, l.weight.size(), l.weight.begin());
    pos += l.weight.size();
    std::copy_n(flat.begin() + pos, l.bias.size(), l.bias.begin());
    pos += l.bias.size();
  }
}

void DenoiserParams::validate() const {
  if (layers.empty()) throw ValidationError("denoiser has no layers");
  if (layers.front().in_channels != 2 || layers.back().out_channels != 2)
    throw ValidationError("denoiser must map 2 channels to 2 channels");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvLayer& c = layers[l];
    if (c.kernel < 1 || c.kernel % 2 == 0) throw ValidationError("denoiser kernel sizes must be odd");
    if (l > 0 && c.in_channels != layers[l - 1].out_channels)
      throw ValidationError("denoiser layer widths do not chain");
    if (c.weight.size() != std::size_t(c.out_channels) * c.in_channels * c.kernel * c.kernel ||
        c.bias.size() != std::size_t(c.out_channels))
      throw ValidationError("denoiser weight block has the wrong size");
    for (double w : c.weight)
      if (!std::isfinite(w)) throw ValidationError("denoiser weights must be finite");
    for (double b : c.bias)
      if (!std::isfinite(b)) throw ValidationError("denoiser biases must be finite");
  }
  if (!(channel_scale[0] > 0.0) || !(channel_scale[1] > 0.0))
    throw ValidationError("denoiser channel scales must be positive");
}

MaterialImage denoise(const DenoiserParams& rho, const MaterialImage& x) {
  const std::size_t plane = x.shape.pixels();
  if (x.densities.size() != 2 * plane) throw DimensionError("denoise: image buffer does not match shape");
  std::vector<double> h(2 * plane);
  // reciprocal products, exactly as in the taped version
  const double inv[2] = {1.0 / rho.channel_scale[0], 1.0 / rho.channel_scale[1]};
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = x.densities[i] * inv[i / plane];
  for (std::size_t l = 0; l < rho.layers.size(); ++l) {
    const ConvLayer& c = rho.layers[l];
    const ConvShape s{c.in_channels, c.out_channels, c.kernel, x.shape.width, x.shape.height};
    std::vector<double> next(plane * c.out_channels);
    conv2d_forward(s, h, c.weight, c.bias, next);
    if (l + 1 < rho.layers.size())
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    h = std::move(next);
  }
  MaterialImage out = x;
  for (std::size_t i = 0; i < out.densities.size(); ++i)
    out.densities[i] -= rho.channel_scale[i / plane] * h[i];
  return out;
}

DenoiserVars register_parameters(Tape& tape, const DenoiserParams& rho) {
  DenoiserVars vars;
  for (const auto& l : rho.layers) {
    vars.weight.push_back(tape.parameter(l.weight));
    vars.bias.push_back(tape.parameter(l.bias));
  }
  return vars;
}

std::vector<double> gather_gradient(const Tape& tape, const DenoiserVars& vars) {
  std::vector<double> flat;
  for (std::size_t l = 0; l < vars.weight.size(); ++l) {
    const auto gw = tape.grad(vars.weight[l]);
    const auto gb = tape.grad(vars.bias[l]);
    flat.insert(flat.end(), gw.begin(), gw.end());
    flat.insert(flat.end(), gb.begin(), gb.end());
  }
  return flat;
}

Tape::Var denoise(Tape& tape, const DenoiserParams& rho, const DenoiserVars& vars, Tape::Var x,
                  ImageShape shape) {
  if (tape.value(x).size() != 2 * shape.pixels()) throw DimensionError("denoise: image does not match shape");
  Tape::Var h = ops::scale_planes(tape, x, {1.0 / rho.channel_scale[0], 1.0 / rho.channel_scale[1]});
  for (std::size_t l = 0; l < rho.layers.size(); ++l) {
    const ConvLayer& c = rho.layers[l];
    const ConvShape s{c.in_channels, c.out_channels, c.kernel, shape.width, shape.height};
    h = ops::conv2d(tape, s, h, vars.weight[l], vars.bias[l]);
    if (l + 1 < rho.layers.size()) h = ops::relu(tape, h);
  }
  Tape::Var noise = ops::scale_planes(tape, h, {rho.channel_scale[0], rho.channel_scale[1]});
  return ops::sub(tape, x, noise);
}

void save_denoiser(const std::filesystem::path& stem, const DenoiserParams& rho) {
  rho.validate();
  Header h;
  h.set("format", std::string("dualct-denoiser"));
  h.set("layers", static_cast<long long>(rho.layers.size()));
  for (std::size_t l = 0; l < rho.layers.size(); ++l) {
    const ConvLayer& c = rho.layers[l];
    h.set("layer" + std::to_string(l),
          std::to_string(c.in_channels) + " " + std::to_string(c.out_channels) + " " + std::to_string(c.kernel));
  }
  h.set("channel_scale", format_double(rho.channel_scale[0]) + " " + format_double(rho.channel_scale[1]));
  h.set("activation", std::string("relu"));
  h.set("weights", std::to_string(rho.parameter_count()) + " float64-le per layer: weight[out][in][k][k] bias[out]");
  h.save(header_path(stem));
  write_raw(payload_path(stem, ".bin"), rho.flatten(), RawType::Float64);
}

DenoiserParams load_denoiser(const std::filesystem::path& stem) {
  const Header h = Header::load(header_path(stem));
  if (h.get("format") != "dualct-denoiser") throw ParseError("not a denoiser header", 0);
  DenoiserParams rho;
  const long long n = h.get_int("layers");
  if (n < 1 || n > 64) throw ParseError("denoiser header has an invalid layer count", 0);
  for (long long l = 0; l < n; ++l) {
    std::istringstream in(h.get("layer" + std::to_string(l)));
    ConvLayer c;
    if (!(in >> c.in_channels >> c.out_channels >> c.kernel) || c.in_channels < 1 || c.out_channels < 1 ||
        c.kernel < 1)
      throw ParseError("denoiser layer spec is malformed", 0);
    c.weight.resize(std::size_t(c.out_channels) * c.in_channels * c.kernel * c.kernel);
    c.bias.resize(c.out_channels);
    rho.layers.push_back(std::move(c));
  }
  std::istringstream sc(h.get("channel_scale"));
  if (!(sc >> rho.channel_scale[0] >> rho.channel_scale[1])) throw ParseError("denoiser channel_scale malformed", 0);
  rho.assign(read_raw(payload_path(stem, ".bin"), RawType::Float64, rho.parameter_count()));
  rho.validate();
  return rho;
}

}  // namespace dualct
