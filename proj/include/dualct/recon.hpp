#pragma once

#include <array>
#include <functional>
#include <span>
#include <vector>

#include "dualct/decomp.hpp"
#include "dualct/projector.hpp"
#include "dualct/types.hpp"

namespace dualct {

struct ReconConfig {
  /// Regularization weight. Values <= 0 select
  /// lambda_factor * median(b_diag) * ||A||^2 per reconstruction.
  double lambda = 0.0;
  double lambda_factor = 0.05;
  int k_outer = 3;
  int cg_max_iter = 20;
  double cg_rel_tol = 1e-6;

  void validate() const;
};

/// Data-consistency system of one reconstruction: per material channel c,
///   H_c x = A^T (b_c * (A x)),   rhs_c = A^T (b_c * p_hat_c).
class DCSystem {
 public:
  DCSystem(const Projector& projector, std::array<std::vector<double>, 2> b_diag,
           const MaterialSinogram& p_hat);

  const Projector& projector() const { return *projector_; }
  ImageShape shape() const { return projector_->geometry().image; }
  const std::array<std::vector<double>, 2>& b_diag() const { return b_diag_; }
  /// Both channels, channel-major.
  const std::vector<double>& rhs() const { return rhs_; }

  /// (H_c + lambda I) x for one channel.
  void apply(int channel, double lambda, std::span<const double> x, std::span<double> out) const;

 private:
  const Projector* projector_;
  std::array<std::vector<double>, 2> b_diag_;
  std::vector<double> rhs_;
  mutable std::vector<double> scratch_;
};

/// Both channels; the channels never mix.
void normal_operator(const DCSystem& system, double lambda, std::span<const double> x,
                     std::span<double> out);

struct CgReport {
  int iterations = 0;
  double rel_residual = 0.0;
  std::vector<double> residual_history;  // ||r_k|| / ||b||, starting at k = 0
};

/// Conjugate gradient on an SPD operator. `x` holds the initial guess and
/// receives the solution. Throws DivergenceError on non-finite values.
CgReport conjugate_gradient(const std::function<void(std::span<const double>, std::span<double>)>& op,
                            std::span<const double> b, std::span<double> x, int max_iter,
                            double rel_tol);

struct DcReport {
  std::array<CgReport, 2> cg;
  std::size_t clamped = 0;  // negative pixels zeroed by the projection
};

/// Solves (H + lambda I) x = rhs + lambda z per channel, starting from
/// `warm_start` when given. The unclamped solution is returned; see
/// dc_solve for the projected one.
MaterialImage dc_solve_unclamped(const DCSystem& system, const MaterialImage& z, double lambda,
                                 const ReconConfig& config, const MaterialImage* warm_start = nullptr,
                                 DcReport* report = nullptr);

/// dc_solve_unclamped followed by the projection onto x >= 0.
MaterialImage dc_solve(const DCSystem& system, const MaterialImage& z, double lambda,
                       const ReconConfig& config, const MaterialImage* warm_start = nullptr,
                       DcReport* report = nullptr);

/// Vector-Jacobian product of the unclamped DC solution with respect to z:
/// lambda (H + lambda I)^{-1} g, from a second CG solve.
std::vector<double> dc_backward(const DCSystem& system, double lambda, std::span<const double> upstream,
                                const ReconConfig& config, DcReport* report = nullptr);

/// ||A||^2 by power iteration on A^T A from a fixed start vector.
double operator_norm_sq(const Projector& projector, int iterations = 30);

double default_lambda(const std::array<std::vector<double>, 2>& b_diag, double norm_sq, double factor);

using Denoiser = std::function<MaterialImage(const MaterialImage&)>;

struct E2EReport {
  double lambda = 0.0;
  std::size_t flagged_rays = 0;
  std::vector<DcReport> iterations;
};

/// Unrolled inference: z = 0; repeat K times { x = DC(z); z = D(x) }.
/// Returns the last DC output. CG warm-starts from the previous x.
MaterialImage e2e_decomp(const EnergySinogram& y, const PolynomialDecomposer& decomposer,
                         const Denoiser& denoiser, const Projector& projector, const ReconConfig& config,
                         E2EReport* report = nullptr);

/// Decomposes in the sinogram domain, then FBP per material, clamped >= 0.
MaterialImage fbp_decomp(const EnergySinogram& y, const PolynomialDecomposer& decomposer,
                         const Projector& projector, FbpFilter filter = FbpFilter::RamLak);

}  // namespace dualct
