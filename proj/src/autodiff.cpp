#include "dualct/autodiff.hpp"

#include <algorithm>

#include "dualct/error.hpp"

namespace dualct {

Tape::Var Tape::constant(std::vector<double> value) {
  nodes_.push_back({std::move(value), {}, false, {}});
  return {nodes_.size() - 1};
}

Tape::Var Tape::parameter(std::vector<double> value) {
  nodes_.push_back({std::move(value), {}, true, {}});
  return {nodes_.size() - 1};
}

Tape::Var Tape::record(std::vector<double> value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
  nodes_.push_back({std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return {nodes_.size() - 1};
}

std::vector<double> Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

void Tape::accumulate(Var v, std::span<const double> g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) throw DimensionError("tape: gradient size does not match node value");
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward(Var root) {
  if (nodes_[root.id].value.size() != 1) throw DimensionError("tape: backward root must be a scalar");
  for (Node& n : nodes_) n.grad.clear();
  const double one = 1.0;
  accumulate(root, std::span<const double>(&one, 1));
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // the closure may append to grads of earlier nodes only
    const std::vector<double> g = n.grad;
    n.backward(g, *this);
  }
}

void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> y) {
  const int w = s.width, h = s.height, k = s.kernel, r = k / 2;
  const std::size_t plane = std::size_t(w) * h;
  if (x.size() != plane * s.in_channels || y.size() != plane * s.out_channels ||
      weight.size() != std::size_t(s.out_channels) * s.in_channels * k * k || bias.size() != std::size_t(s.out_channels))
    throw DimensionError("conv2d: buffer sizes do not match the layer shape");
  for (int o = 0; o < s.out_channels; ++o) {
    std::span<double> yo = y.subspan(o * plane, plane);
    std::fill(yo.begin(), yo.end(), bias[o]);
    for (int c = 0; c < s.in_channels; ++c) {
      std::span<const double> xc = x.subspan(c * plane, plane);
      const double* kern = weight.data() + (std::size_t(o) * s.in_channels + c) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - r;
        for (int kx = 0; kx < k; ++kx) {
          const int dx = kx - r;
          const double wv = kern[ky * k + kx];
          if (wv == 0.0) continue;
          const int j0 = std::max(0, -dy), j1 = std::min(h, h - dy);
          const int i0 = std::max(0, -dx), i1 = std::min(w, w - dx);
          for (int j = j0; j < j1; ++j) {
            double* yrow = yo.data() + std::size_t(j) * w;
            const double* xrow = xc.data() + std::size_t(j + dy) * w + dx;
            for (int i = i0; i < i1; ++i) yrow[i] += wv * xrow[i];
          }
        }
      }
    }
  }
}

namespace ops {

namespace {

void check_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want) throw DimensionError(std::string(what) + ": input size does not match the layer shape");
}

}  // namespace

Tape::Var conv2d(Tape& tape, const ConvShape& s, Tape::Var x, Tape::Var weight, Tape::Var bias) {
  if (s.kernel % 2 == 0) throw ValidationError("conv2d: kernel size must be odd");
  const std::size_t plane = std::size_t(s.width) * s.height;
  check_size(tape.value(x).size(), plane * s.in_channels, "conv2d");
  check_size(tape.value(weight).size(), std::size_t(s.out_channels) * s.in_channels * s.kernel * s.kernel,
             "conv2d weight");
  check_size(tape.value(bias).size(), std::size_t(s.out_channels), "conv2d bias");
  std::vector<double> y(plane * s.out_channels);
  conv2d_forward(s, tape.value(x), tape.value(weight), tape.value(bias), y);
  return tape.record(std::move(y), {x, weight, bias}, [s, x, weight, bias](const std::vector<double>& gy, Tape& t) {
    const int w = s.width, h = s.height, k = s.kernel, r = k / 2;
    const std::size_t plane = std::size_t(w) * h;
    const auto& xv = t.value(x);
    const auto& wv = t.value(weight);
    std::vector<double> gx(xv.size(), 0.0), gw(wv.size(), 0.0), gb(s.out_channels, 0.0);
    for (int o = 0; o < s.out_channels; ++o) {
      const double* go = gy.data() + o * plane;
      double acc = 0.0;
      for (std::size_t m = 0; m < plane; ++m) acc += go[m];
      gb[o] = acc;
      for (int c = 0; c < s.in_channels; ++c) {
        const double* xc = xv.data() + c * plane;
        double* gxc = gx.data() + c * plane;
        const std::size_t kbase = (std::size_t(o) * s.in_channels + c) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - r;
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - r;
            const double kw = wv[kbase + ky * k + kx];
            const int j0 = std::max(0, -dy), j1 = std::min(h, h - dy);
            const int i0 = std::max(0, -dx), i1 = std::min(w, w - dx);
            double gacc = 0.0;
            for (int j = j0; j < j1; ++j) {
              const double* grow = go + std::size_t(j) * w;
              const std::size_t src = std::size_t(j + dy) * w + dx;
              for (int i = i0; i < i1; ++i) {
                gacc += grow[i] * xc[src + i];
                gxc[src + i] += kw * grow[i];
              }
            }
            gw[kbase + ky * k + kx] = gacc;
          }
        }
      }
    }
    t.accumulate(x, gx);
    t.accumulate(weight, gw);
    t.accumulate(bias, gb);
  });
}

Tape::Var relu(Tape& tape, Tape::Var x) {
  std::vector<double> y = tape.value(x);
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(y), {x}, [x](const std::vector<double>& g, Tape& t) {
    const auto& xv = t.value(x);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
    t.accumulate(x, gx);
  });
}

Tape::Var sub(Tape& tape, Tape::Var a, Tape::Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  check_size(bv.size(), av.size(), "sub");
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return tape.record(std::move(y), {a, b}, [a, b](const std::vector<double>& g, Tape& t) {
    t.accumulate(a, g);
    std::vector<double> neg(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
    t.accumulate(b, neg);
  });
}

Tape::Var scale_planes(Tape& tape, Tape::Var x, std::vector<double> factors) {
  const auto& xv = tape.value(x);
  if (factors.empty() || xv.size() % factors.size() != 0)
    throw DimensionError("scale_planes: size is not a multiple of the plane count");
  const std::size_t plane = xv.size() / factors.size();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factors[i / plane];
  return tape.record(std::move(y), {x}, [x, plane, f = std::move(factors)](const std::vector<double>& g, Tape& t) {
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * f[i / plane];
    t.accumulate(x, gx);
  });
}

Tape::Var clamp_nonneg(Tape& tape, Tape::Var x) {
  std::vector<double> y = tape.value(x);
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(y), {x}, [x](const std::vector<double>& g, Tape& t) {
    const auto& xv = t.value(x);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
    t.accumulate(x, gx);
  });
}

Tape::Var sum(Tape& tape, Tape::Var x) {
  double s = 0.0;
  for (double v : tape.value(x)) s += v;
  return tape.record({s}, {x}, [x](const std::vector<double>& g, Tape& t) {
    t.accumulate(x, std::vector<double>(t.value(x).size(), g[0]));
  });
}

Tape::Var mse(Tape& tape, Tape::Var x, std::span<const double> target) {
  const auto& xv = tape.value(x);
  check_size(target.size(), xv.size(), "mse");
  if (xv.empty()) throw DimensionError("mse: empty input");
  std::vector<double> diff(xv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    diff[i] = xv[i] - target[i];
    s += diff[i] * diff[i];
  }
  const double n = double(xv.size());
  return tape.record({s / n}, {x}, [x, n, d = std::move(diff)](const std::vector<double>& g, Tape& t) {
    std::vector<double> gx(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) gx[i] = 2.0 * g[0] * d[i] / n;
    t.accumulate(x, gx);
  });
}

Tape::Var forward_project(Tape& tape, const Projector& projector, Tape::Var image) {
  std::vector<double> y = projector.forward(tape.value(image));
  return tape.record(std::move(y), {image}, [&projector, image](const std::vector<double>& g, Tape& t) {
    t.accumulate(image, projector.back(g));
  });
}

Tape::Var back_project(Tape& tape, const Projector& projector, Tape::Var sinogram) {
  std::vector<double> y = projector.back(tape.value(sinogram));
  return tape.record(std::move(y), {sinogram}, [&projector, sinogram](const std::vector<double>& g, Tape& t) {
    t.accumulate(sinogram, projector.forward(g));
  });
}

Tape::Var dc_solve(Tape& tape, const DCSystem& system, double lambda, const ReconConfig& config,
                   Tape::Var z, const MaterialImage* warm_start) {
  const ImageShape shape = system.shape();
  MaterialImage zi{shape, tape.value(z)};
  MaterialImage x = dc_solve_unclamped(system, zi, lambda, config, warm_start);
  return tape.record(std::move(x.densities), {z},
                     [&system, lambda, config, z](const std::vector<double>& g, Tape& t) {
                       t.accumulate(z, dc_backward(system, lambda, g, config));
                     });
}

}  // namespace ops
}  // namespace dualct
