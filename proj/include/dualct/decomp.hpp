#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "dualct/spectral.hpp"
#include "dualct/types.hpp"

namespace dualct {

/// 2x2 matrix, row-major: m[r][c].
using Mat2 = std::array<std::array<double, 2>, 2>;

/// Bivariate polynomial map from energy measurements (y1, y2) to material
/// line integrals (p1, p2):
///
///   p_c = sum_{i<=I, j<=J} theta(i, j, c) u1^i u2^j,  u_k = (y_k - offset_k) * scale_k
///
/// The affine input rescaling keeps the monomial basis well conditioned.
struct PolynomialDecomposer {
  int degree_i = 3;
  int degree_j = 3;
  std::array<double, 2> offset{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};
  std::vector<double> theta;  // [channel][i][j]

  static PolynomialDecomposer zeros(int degree_i, int degree_j);

  std::size_t terms() const { return std::size_t(degree_i + 1) * (degree_j + 1); }
  double& coef(int i, int j, int c) { return theta[c * terms() + i * (degree_j + 1) + j]; }
  double coef(int i, int j, int c) const { return theta[c * terms() + i * (degree_j + 1) + j]; }

  std::array<double, 2> operator()(std::array<double, 2> y) const;
  /// J[c][k] = d p_c / d y_k.
  Mat2 jacobian(std::array<double, 2> y) const;
};

/// Monomials y1^i y2^j, i-major, length (degree_i + 1)(degree_j + 1).
std::vector<double> design_row(std::array<double, 2> y, int degree_i, int degree_j);

struct CalibrationPair {
  EnergySinogram measured;
  MaterialSinogram truth;
};

struct FitOptions {
  bool rescale_inputs = true;
  bool count_weighted = true;  // otherwise every ray weighs one
  double damping = 1e-10;      // added to the Gram diagonal
};

struct FitReport {
  std::size_t rays = 0;
  double condition_number = 0.0;  // of the undamped weighted Gram matrix
  std::array<double, 2> rms_residual{0.0, 0.0};
  std::vector<std::array<double, 2>> residuals;  // fitted minus truth, per ray in input order
};

/// Weighted linear least squares per output channel on the normal
/// equations. The weight of a ray is the inverse of its summed measurement
/// variances, 1 / (1/w1 + 1/w2). Throws InsufficientDataError with too few
/// rays and ConditioningError on a rank-deficient design.
PolynomialDecomposer fit(std::span<const CalibrationPair> calibration, int degree_i, int degree_j,
                         const FitOptions& options = {}, FitReport* report = nullptr);

MaterialSinogram apply(const PolynomialDecomposer& decomposer, const EnergySinogram& y);

/// Noiseless rays over a rectangular (p1, p2) grid on [0, p_max].
CalibrationPair make_calibration(const Spectrum& spectrum, const MaterialBasis& basis,
                                 std::array<double, 2> p_max, int nodes_per_axis);

/// Statistical weights transported to the material domain.
struct DecompCovariance {
  std::array<std::vector<double>, 2> b_diag;
  std::vector<Mat2> b_full;  // only when requested
  std::array<double, 2> floor{0.0, 0.0};
  std::size_t flagged = 0;  // rays with a numerically singular Jacobian
};

/// G^{-1} W G^{-T} with G = jacobian^T the gradient layout of P, i.e.
/// J^{-T} W J^{-1}: the inverse of the linearized covariance J W^{-1} J^T
/// of the decomposed line integrals.
Mat2 transport_weights(const Mat2& jacobian, double w1, double w2);

DecompCovariance covariance_weights(const PolynomialDecomposer& decomposer, const EnergySinogram& y,
                                    bool keep_full = false);

void save_decomposer(const std::filesystem::path& stem, const PolynomialDecomposer& decomposer);
PolynomialDecomposer load_decomposer(const std::filesystem::path& stem);

}  // namespace dualct
