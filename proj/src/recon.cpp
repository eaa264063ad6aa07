#include "dualct/recon.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dualct/error.hpp"

namespace dualct {

void ReconConfig::validate() const {
  if (!(lambda > 0.0) && !(lambda_factor > 0.0))
    throw ConfigError("recon: lambda or lambda_factor must be positive");
  if (k_outer < 1) throw ConfigError("recon: k_outer must be at least 1");
  if (cg_max_iter < 1) throw ConfigError("recon: cg_max_iter must be at least 1");
  if (!(cg_rel_tol >= 0.0)) throw ConfigError("recon: cg_rel_tol must be nonnegative");
}

DCSystem::DCSystem(const Projector& projector, std::array<std::vector<double>, 2> b_diag,
                   const MaterialSinogram& p_hat)
    : projector_(&projector), b_diag_(std::move(b_diag)) {
  const Geometry& g = projector.geometry();
  const std::size_t rays = g.rays();
  const std::size_t pixels = g.image.pixels();
  for (int c = 0; c < 2; ++c) {
    if (b_diag_[c].size() != rays) throw DimensionError("DC system: b_diag does not match geometry");
    if (p_hat.p[c].size() != rays) throw DimensionError("DC system: material sinogram does not match geometry");
    for (double b : b_diag_[c])
      if (!(b > 0.0) || !std::isfinite(b)) throw ValidationError("DC system: b_diag must be positive");
  }
  rhs_.assign(2 * pixels, 0.0);
  scratch_.resize(rays);
  for (int c = 0; c < 2; ++c) {
    for (std::size_t r = 0; r < rays; ++r) scratch_[r] = b_diag_[c][r] * p_hat.p[c][r];
    projector.back(scratch_, std::span<double>(rhs_).subspan(c * pixels, pixels));
  }
}

void DCSystem::apply(int channel, double lambda, std::span<const double> x, std::span<double> out) const {
  projector_->forward(x, scratch_);
  const auto& b = b_diag_[channel];
  for (std::size_t r = 0; r < scratch_.size(); ++r) scratch_[r] *= b[r];
  projector_->back(scratch_, out);
  for (std::size_t m = 0; m < out.size(); ++m) out[m] += lambda * x[m];
}

void normal_operator(const DCSystem& system, double lambda, std::span<const double> x,
                     std::span<double> out) {
  const std::size_t pixels = system.shape().pixels();
  if (x.size() != 2 * pixels || out.size() != 2 * pixels)
    throw DimensionError("normal_operator: image pair does not match geometry");
  for (int c = 0; c < 2; ++c)
    system.apply(c, lambda, x.subspan(c * pixels, pixels), out.subspan(c * pixels, pixels));
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

// Conjugate residual variant: the same Krylov recurrence as CG, but each
// step minimizes ||r|| instead of the energy norm of the error, so the
// residual never grows. One operator application per iteration.
CgReport conjugate_gradient(const std::function<void(std::span<const double>, std::span<double>)>& op,
                            std::span<const double> b, std::span<double> x, int max_iter,
                            double rel_tol) {
  const std::size_t n = b.size();
  CgReport report;
  const double b_norm = std::sqrt(dot(b, b));
  if (!std::isfinite(b_norm)) throw DivergenceError("CG: right-hand side is not finite");
  if (b_norm == 0.0) {
    std::fill(x.begin(), x.end(), 0.0);
    report.residual_history.push_back(0.0);
    return report;
  }

  std::vector<double> r(n), p(n), ar(n), ap(n);
  op(x, ar);
  for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ar[i];
  report.rel_residual = std::sqrt(dot(r, r)) / b_norm;
  report.residual_history.push_back(report.rel_residual);
  if (!(report.rel_residual > rel_tol) || max_iter < 1) return report;

  op(r, ar);
  p = r;
  ap = ar;
  double rar = dot(r, ar);

  for (int it = 0; it < max_iter && report.rel_residual > rel_tol; ++it) {
    if (!std::isfinite(rar)) throw DivergenceError("CG: non-finite curvature");
    if (!(rar > 0.0)) throw DivergenceError("CG: operator is not positive definite");
    const double apap = dot(ap, ap);
    if (!(apap > 0.0)) break;
    const double alpha = rar / apap;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr = dot(r, r);
    if (!std::isfinite(rr)) throw DivergenceError("CG: residual is not finite");
    report.iterations = it + 1;
    report.rel_residual = std::sqrt(rr) / b_norm;
    report.residual_history.push_back(report.rel_residual);
    if (!(report.rel_residual > rel_tol) || it + 1 == max_iter) break;

    op(r, ar);
    const double rar_next = dot(r, ar);
    const double beta = rar_next / rar;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = r[i] + beta * p[i];
      ap[i] = ar[i] + beta * ap[i];
    }
    rar = rar_next;
  }
  return report;
}

MaterialImage dc_solve_unclamped(const DCSystem& system, const MaterialImage& z, double lambda,
                                 const ReconConfig& config, const MaterialImage* warm_start,
                                 DcReport* report) {
  const ImageShape shape = system.shape();
  const std::size_t pixels = shape.pixels();
  if (!(z.shape == shape) || z.densities.size() != 2 * pixels)
    throw DimensionError("dc_solve: z does not match the system geometry");
  if (!(lambda >= 0.0)) throw ValidationError("dc_solve: lambda must be nonnegative");

  MaterialImage x = MaterialImage::zeros(shape);
  if (warm_start) {
    if (!(warm_start->shape == shape)) throw DimensionError("dc_solve: warm start does not match geometry");
    x.densities = warm_start->densities;
  }
  std::vector<double> rhs(pixels);
  DcReport local;
  for (int c = 0; c < 2; ++c) {
    const auto zc = z.channel(c);
    for (std::size_t m = 0; m < pixels; ++m) rhs[m] = system.rhs()[c * pixels + m] + lambda * zc[m];
    auto op = [&](std::span<const double> in, std::span<double> out) { system.apply(c, lambda, in, out); };
    local.cg[c] = conjugate_gradient(op, rhs, x.channel(c), config.cg_max_iter, config.cg_rel_tol);
  }
  for (double v : x.densities)
    if (!std::isfinite(v)) throw DivergenceError("dc_solve: solution is not finite");
  if (report) *report = std::move(local);
  return x;
}

MaterialImage dc_solve(const DCSystem& system, const MaterialImage& z, double lambda,
                       const ReconConfig& config, const MaterialImage* warm_start, DcReport* report) {
  DcReport local;
  MaterialImage x = dc_solve_unclamped(system, z, lambda, config, warm_start, &local);
  for (double& v : x.densities) {
    if (v < 0.0) {
      v = 0.0;
      ++local.clamped;
    }
  }
  if (report) *report = std::move(local);
  return x;
}

std::vector<double> dc_backward(const DCSystem& system, double lambda, std::span<const double> upstream,
                                const ReconConfig& config, DcReport* report) {
  const std::size_t pixels = system.shape().pixels();
  if (upstream.size() != 2 * pixels) throw DimensionError("dc_backward: gradient does not match geometry");
  std::vector<double> grad(2 * pixels, 0.0);
  if (lambda == 0.0) return grad;
  DcReport local;
  for (int c = 0; c < 2; ++c) {
    auto op = [&](std::span<const double> in, std::span<double> out) { system.apply(c, lambda, in, out); };
    std::span<double> gc = std::span<double>(grad).subspan(c * pixels, pixels);
    local.cg[c] = conjugate_gradient(op, upstream.subspan(c * pixels, pixels), gc, config.cg_max_iter,
                                     config.cg_rel_tol);
    for (double& v : gc) v *= lambda;
  }
  if (report) *report = std::move(local);
  return grad;
}

double operator_norm_sq(const Projector& projector, int iterations) {
  const std::size_t pixels = projector.geometry().image.pixels();
  std::vector<double> v(pixels, 1.0 / std::sqrt(double(pixels)));
  std::vector<double> sino(projector.geometry().rays());
  std::vector<double> w(pixels);
  double estimate = 0.0;
  for (int it = 0; it < iterations; ++it) {
    projector.forward(v, sino);
    projector.back(sino, w);
    const double norm = std::sqrt(dot(w, w));
    if (norm == 0.0) return 0.0;
    estimate = norm;
    for (std::size_t m = 0; m < pixels; ++m) v[m] = w[m] / norm;
  }
  return estimate;
}

double default_lambda(const std::array<std::vector<double>, 2>& b_diag, double norm_sq, double factor) {
  std::vector<double> all;
  all.reserve(b_diag[0].size() + b_diag[1].size());
  all.insert(all.end(), b_diag[0].begin(), b_diag[0].end());
  all.insert(all.end(), b_diag[1].begin(), b_diag[1].end());
  if (all.empty()) throw ValidationError("default_lambda: no weights");
  auto mid = all.begin() + all.size() / 2;
  std::nth_element(all.begin(), mid, all.end());
  return factor * *mid * norm_sq;
}

MaterialImage e2e_decomp(const EnergySinogram& y, const PolynomialDecomposer& decomposer,
                         const Denoiser& denoiser, const Projector& projector, const ReconConfig& config,
                         E2EReport* report) {
  config.validate();
  const Geometry& g = projector.geometry();
  if (y.n_angles != g.n_angles || y.n_detectors != g.n_detectors)
    throw DimensionError("e2e_decomp: sinogram does not match geometry");

  const MaterialSinogram p_hat = apply(decomposer, y);
  DecompCovariance cov = covariance_weights(decomposer, y);
  const std::size_t flagged = cov.flagged;
  const double lambda = config.lambda > 0.0
                            ? config.lambda
                            : default_lambda(cov.b_diag, operator_norm_sq(projector), config.lambda_factor);
  const DCSystem system(projector, std::move(cov.b_diag), p_hat);

  E2EReport local;
  local.lambda = lambda;
  local.flagged_rays = flagged;
  MaterialImage z = MaterialImage::zeros(g.image);
  MaterialImage x = MaterialImage::zeros(g.image);
  for (int k = 0; k < config.k_outer; ++k) {
    DcReport dc;
    x = dc_solve(system, z, lambda, config, &x, &dc);
    local.iterations.push_back(std::move(dc));
    if (k + 1 < config.k_outer) {
      z = denoiser(x);
      if (!(z.shape == g.image) || z.densities.size() != x.densities.size())
        throw DimensionError("e2e_decomp: denoiser changed the image shape");
    }
  }
  if (report) *report = std::move(local);
  return x;
}

MaterialImage fbp_decomp(const EnergySinogram& y, const PolynomialDecomposer& decomposer,
                         const Projector& projector, FbpFilter filter) {
  const Geometry& g = projector.geometry();
  if (y.n_angles != g.n_angles || y.n_detectors != g.n_detectors)
    throw DimensionError("fbp_decomp: sinogram does not match geometry");
  const MaterialSinogram p_hat = apply(decomposer, y);
  MaterialImage x = MaterialImage::zeros(g.image);
  for (int c = 0; c < 2; ++c) {
    const std::vector<double> img = fbp(projector, p_hat.p[c], filter);
    auto out = x.channel(c);
    for (std::size_t m = 0; m < img.size(); ++m) out[m] = std::max(img[m], 0.0);
  }
  return x;
}

}  // namespace dualct
