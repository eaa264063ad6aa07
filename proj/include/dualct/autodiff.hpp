#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dualct/projector.hpp"
#include "dualct/recon.hpp"

namespace dualct {

/// Reverse-mode tape over flat double buffers. Nodes are appended in
/// evaluation order, so walking the tape backwards is a valid topological
/// order for the gradient sweep.
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };
  using Backward = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

  Var constant(std::vector<double> value);
  Var parameter(std::vector<double> value);
  /// Records a node; `backward` runs only when some input needs a gradient.
  Var record(std::vector<double> value, std::initializer_list<Var> inputs, Backward backward);

  const std::vector<double>& value(Var v) const { return nodes_[v.id].value; }
  /// Zero-filled when nothing flowed into `v`.
  std::vector<double> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(Var v, std::span<const double> g);

  /// Seeds d(root)/d(root) = 1; `root` must be a scalar.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

struct ConvShape {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int width = 0;
  int height = 0;
};

/// Same-size 2-D cross-correlation with zero padding. Layouts:
/// x [in][h][w], weight [out][in][k][k], bias [out], y [out][h][w].
void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> y);

namespace ops {

Tape::Var conv2d(Tape& tape, const ConvShape& shape, Tape::Var x, Tape::Var weight, Tape::Var bias);
Tape::Var relu(Tape& tape, Tape::Var x);
Tape::Var sub(Tape& tape, Tape::Var a, Tape::Var b);
/// Multiplies each of `factors.size()` equal planes by its factor.
Tape::Var scale_planes(Tape& tape, Tape::Var x, std::vector<double> factors);
/// max(x, 0) with subgradient 1 where x > 0 and 0 elsewhere.
Tape::Var clamp_nonneg(Tape& tape, Tape::Var x);
Tape::Var sum(Tape& tape, Tape::Var x);
/// mean((x - target)^2)
Tape::Var mse(Tape& tape, Tape::Var x, std::span<const double> target);
/// Single-channel A and A^T; each is the other's backward.
Tape::Var forward_project(Tape& tape, const Projector& projector, Tape::Var image);
Tape::Var back_project(Tape& tape, const Projector& projector, Tape::Var sinogram);
/// Unclamped DC solution as a function of z (implicit backward through a
/// second CG solve). `system` must outlive the backward sweep.
Tape::Var dc_solve(Tape& tape, const DCSystem& system, double lambda, const ReconConfig& config,
                   Tape::Var z, const MaterialImage* warm_start = nullptr);

}  // namespace ops
}  // namespace dualct
