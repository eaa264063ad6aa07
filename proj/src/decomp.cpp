#include "dualct/decomp.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dualct/error.hpp"
#include "dualct/io.hpp"

namespace dualct {

PolynomialDecomposer PolynomialDecomposer::zeros(int degree_i, int degree_j) {
  if (degree_i < 0 || degree_j < 0) throw ValidationError("polynomial degrees must be nonnegative");
  PolynomialDecomposer d;
  d.degree_i = degree_i;
  d.degree_j = degree_j;
  d.theta.assign(2 * d.terms(), 0.0);
  return d;
}

std::vector<double> design_row(std::array<double, 2> y, int degree_i, int degree_j) {
  std::vector<double> row(std::size_t(degree_i + 1) * (degree_j + 1));
  double pi = 1.0;
  for (int i = 0; i <= degree_i; ++i) {
    double pj = 1.0;
    for (int j = 0; j <= degree_j; ++j) {
      row[i * (degree_j + 1) + j] = pi * pj;
      pj *= y[1];
    }
    pi *= y[0];
  }
  return row;
}

namespace {

std::array<double, 2> rescale(const PolynomialDecomposer& d, std::array<double, 2> y) {
  return {(y[0] - d.offset[0]) * d.scale[0], (y[1] - d.offset[1]) * d.scale[1]};
}

// powers[e] = u^e for e = 0..degree
template <std::size_t N>
void powers(double u, int degree, std::array<double, N>& out) {
  out[0] = 1.0;
  for (int e = 1; e <= degree; ++e) out[e] = out[e - 1] * u;
}

constexpr int kMaxDegree = 15;

}  // namespace

std::array<double, 2> PolynomialDecomposer::operator()(std::array<double, 2> y) const {
  const auto u = rescale(*this, y);
  std::array<double, kMaxDegree + 1> p1{}, p2{};
  powers(u[0], degree_i, p1);
  powers(u[1], degree_j, p2);
  std::array<double, 2> out{0.0, 0.0};
  for (int c = 0; c < 2; ++c) {
    double acc = 0.0;
    for (int i = 0; i <= degree_i; ++i)
      for (int j = 0; j <= degree_j; ++j) acc += coef(i, j, c) * p1[i] * p2[j];
    out[c] = acc;
  }
  return out;
}

Mat2 PolynomialDecomposer::jacobian(std::array<double, 2> y) const {
  const auto u = rescale(*this, y);
  std::array<double, kMaxDegree + 1> p1{}, p2{};
  powers(u[0], degree_i, p1);
  powers(u[1], degree_j, p2);
  Mat2 J{};
  for (int c = 0; c < 2; ++c) {
    double d1 = 0.0, d2 = 0.0;
    for (int i = 0; i <= degree_i; ++i) {
      for (int j = 0; j <= degree_j; ++j) {
        const double t = coef(i, j, c);
        if (i > 0) d1 += t * i * p1[i - 1] * p2[j];
        if (j > 0) d2 += t * j * p1[i] * p2[j - 1];
      }
    }
    J[c][0] = d1 * scale[0];
    J[c][1] = d2 * scale[1];
  }
  return J;
}

PolynomialDecomposer fit(std::span<const CalibrationPair> calibration, int degree_i, int degree_j,
                         const FitOptions& options, FitReport* report) {
  if (degree_i < 0 || degree_j < 0 || degree_i > kMaxDegree || degree_j > kMaxDegree)
    throw ValidationError("polynomial degrees must lie in [0, 15]");
  PolynomialDecomposer d = PolynomialDecomposer::zeros(degree_i, degree_j);
  const std::size_t terms = d.terms();

  std::size_t rays = 0;
  std::array<double, 2> lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  std::array<double, 2> hi{-lo[0], -lo[1]};
  for (const auto& pair : calibration) {
    const std::size_t n = pair.measured.rays();
    if (pair.truth.rays() != n) throw DimensionError("calibration pair has mismatched ray counts");
    for (int k = 0; k < 2; ++k) {
      if (pair.measured.y[k].size() != n || pair.measured.weights[k].size() != n || pair.truth.p[k].size() != n)
        throw DimensionError("calibration channel does not match its ray count");
      for (double v : pair.measured.y[k]) {
        if (!std::isfinite(v)) throw ValidationError("calibration measurement is not finite");
        lo[k] = std::min(lo[k], v);
        hi[k] = std::max(hi[k], v);
      }
    }
    rays += n;
  }
  if (rays < terms)
    throw InsufficientDataError("fit needs at least " + std::to_string(terms) + " calibration rays, got " +
                                std::to_string(rays));
  if (options.rescale_inputs) {
    for (int k = 0; k < 2; ++k) {
      d.offset[k] = 0.5 * (lo[k] + hi[k]);
      d.scale[k] = hi[k] > lo[k] ? 2.0 / (hi[k] - lo[k]) : 1.0;
    }
  }

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(terms, terms);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(terms, 2);
  Eigen::VectorXd row(terms);
  for (const auto& pair : calibration) {
    for (std::size_t r = 0; r < pair.measured.rays(); ++r) {
      const std::array<double, 2> y{pair.measured.y[0][r], pair.measured.y[1][r]};
      const auto mono = design_row(rescale(d, y), degree_i, degree_j);
      for (std::size_t t = 0; t < terms; ++t) row[t] = mono[t];
      double w = 1.0;
      if (options.count_weighted) {
        const double w1 = pair.measured.weights[0][r];
        const double w2 = pair.measured.weights[1][r];
        if (!(w1 > 0.0) || !(w2 > 0.0)) throw ValidationError("calibration weights must be positive");
        w = 1.0 / (1.0 / w1 + 1.0 / w2);
      }
      gram.selfadjointView<Eigen::Lower>().rankUpdate(row, w);
      rhs.col(0) += w * pair.truth.p[0][r] * row;
      rhs.col(1) += w * pair.truth.p[1][r] * row;
    }
  }
  gram = gram.selfadjointView<Eigen::Lower>();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const double ev_max = eig.eigenvalues().maxCoeff();
  const double ev_min = eig.eigenvalues().minCoeff();
  const double cond = ev_min > 0.0 ? ev_max / ev_min : std::numeric_limits<double>::infinity();
  if (!(ev_max > 0.0) || !(cond < 1e16))
    throw ConditioningError("calibration design matrix is rank deficient", cond);

  gram.diagonal().array() += options.damping;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw ConditioningError("normal equations could not be factorized", cond);
  const Eigen::MatrixXd coeffs = ldlt.solve(rhs);
  for (int c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < terms; ++t) d.theta[c * terms + t] = coeffs(t, c);

  if (report) {
    report->rays = rays;
    report->condition_number = cond;
    report->residuals.clear();
    report->residuals.reserve(rays);
    std::array<double, 2> ss{0.0, 0.0};
    for (const auto& pair : calibration) {
      for (std::size_t r = 0; r < pair.measured.rays(); ++r) {
        const auto p = d({pair.measured.y[0][r], pair.measured.y[1][r]});
        const std::array<double, 2> res{p[0] - pair.truth.p[0][r], p[1] - pair.truth.p[1][r]};
        ss[0] += res[0] * res[0];
        ss[1] += res[1] * res[1];
        report->residuals.push_back(res);
      }
    }
    report->rms_residual = {std::sqrt(ss[0] / double(rays)), std::sqrt(ss[1] / double(rays))};
  }
  return d;
}

MaterialSinogram apply(const PolynomialDecomposer& decomposer, const EnergySinogram& y) {
  if (decomposer.theta.size() != 2 * decomposer.terms())
    throw ValidationError("decomposer coefficient block has the wrong size");
  MaterialSinogram out = MaterialSinogram::zeros(y.n_angles, y.n_detectors);
  const std::size_t n = y.rays();
  if (y.y[0].size() != n || y.y[1].size() != n) throw DimensionError("energy sinogram channel size mismatch");
  for (std::size_t r = 0; r < n; ++r) {
    const auto p = decomposer({y.y[0][r], y.y[1][r]});
    out.p[0][r] = p[0];
    out.p[1][r] = p[1];
  }
  return out;
}

CalibrationPair make_calibration(const Spectrum& spectrum, const MaterialBasis& basis,
                                 std::array<double, 2> p_max, int nodes_per_axis) {
  if (nodes_per_axis < 2) throw ValidationError("calibration grid needs at least two nodes per axis");
  if (!(p_max[0] > 0.0) || !(p_max[1] > 0.0)) throw ValidationError("calibration range must be positive");
  MaterialSinogram p = MaterialSinogram::zeros(1, nodes_per_axis * nodes_per_axis);
  for (int a = 0; a < nodes_per_axis; ++a) {
    for (int b = 0; b < nodes_per_axis; ++b) {
      const std::size_t r = std::size_t(a) * nodes_per_axis + b;
      p.p[0][r] = p_max[0] * a / (nodes_per_axis - 1);
      p.p[1][r] = p_max[1] * b / (nodes_per_axis - 1);
    }
  }
  return {measure_noiseless(p, spectrum, basis), p};
}

Mat2 transport_weights(const Mat2& J, double w1, double w2) {
  const double det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
  // K = J^{-1}
  const Mat2 K{{{J[1][1] / det, -J[0][1] / det}, {-J[1][0] / det, J[0][0] / det}}};
  // B = K^T diag(w) K
  Mat2 B{};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) B[r][c] = K[0][r] * w1 * K[0][c] + K[1][r] * w2 * K[1][c];
  B[0][1] = B[1][0] = 0.5 * (B[0][1] + B[1][0]);
  return B;
}

DecompCovariance covariance_weights(const PolynomialDecomposer& decomposer, const EnergySinogram& y,
                                    bool keep_full) {
  const std::size_t n = y.rays();
  for (int k = 0; k < 2; ++k)
    if (y.y[k].size() != n || y.weights[k].size() != n) throw DimensionError("energy sinogram channel size mismatch");

  DecompCovariance cov;
  cov.b_diag = {std::vector<double>(n), std::vector<double>(n)};
  if (keep_full) cov.b_full.resize(n);
  std::vector<char> singular(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const Mat2 J = decomposer.jacobian({y.y[0][r], y.y[1][r]});
    const double det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
    const double norm2 = J[0][0] * J[0][0] + J[0][1] * J[0][1] + J[1][0] * J[1][0] + J[1][1] * J[1][1];
    if (!(std::abs(det) >= 1e-12 * norm2) || norm2 == 0.0) {
      singular[r] = 1;
      ++cov.flagged;
      if (keep_full) cov.b_full[r] = Mat2{};
      continue;
    }
    const Mat2 B = transport_weights(J, y.weights[0][r], y.weights[1][r]);
    cov.b_diag[0][r] = B[0][0];
    cov.b_diag[1][r] = B[1][1];
    if (keep_full) cov.b_full[r] = B;
  }
  for (int c = 0; c < 2; ++c) {
    std::vector<double> valid;
    valid.reserve(n);
    for (std::size_t r = 0; r < n; ++r)
      if (!singular[r]) valid.push_back(cov.b_diag[c][r]);
    double median = 1.0;
    if (!valid.empty()) {
      auto mid = valid.begin() + valid.size() / 2;
      std::nth_element(valid.begin(), mid, valid.end());
      median = *mid;
    }
    cov.floor[c] = 1e-8 * median;
    for (std::size_t r = 0; r < n; ++r) {
      double& b = cov.b_diag[c][r];
      if (singular[r] || !(b >= cov.floor[c])) b = cov.floor[c];
    }
  }
  return cov;
}

void save_decomposer(const std::filesystem::path& stem, const PolynomialDecomposer& d) {
  Header h;
  h.set("format", std::string("dualct-polynomial-decomposer"));
  h.set("degree_i", static_cast<long long>(d.degree_i));
  h.set("degree_j", static_cast<long long>(d.degree_j));
  h.set("offset", format_double(d.offset[0]) + " " + format_double(d.offset[1]));
  h.set("scale", format_double(d.scale[0]) + " " + format_double(d.scale[1]));
  h.set("coefficients", std::to_string(d.theta.size()) + " float64-le [channel][i][j]");
  h.save(header_path(stem));
  write_raw(payload_path(stem, ".bin"), d.theta, RawType::Float64);
}

PolynomialDecomposer load_decomposer(const std::filesystem::path& stem) {
  const Header h = Header::load(header_path(stem));
  if (h.get("format") != "dualct-polynomial-decomposer") throw ParseError("not a decomposer header", 0);
  PolynomialDecomposer d = PolynomialDecomposer::zeros(static_cast<int>(h.get_int("degree_i")),
                                                       static_cast<int>(h.get_int("degree_j")));
  auto pair = [&](const std::string& key) {
    std::istringstream in(h.get(key));
    std::array<double, 2> v{};
    if (!(in >> v[0] >> v[1])) throw ParseError("decomposer header key '" + key + "' needs two numbers", 0);
    return v;
  };
  d.offset = pair("offset");
  d.scale = pair("scale");
  d.theta = read_raw(payload_path(stem, ".bin"), RawType::Float64, 2 * d.terms());
  return d;
}

}  // namespace dualct
