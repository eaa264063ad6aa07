#include "dualct/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "dualct/error.hpp"
#include "dualct/log.hpp"
#include "dualct/projector.hpp"
#include "dualct/rng.hpp"

namespace dualct {

EnergyGrid::EnergyGrid(double first_kev, double last_kev, double step_kev) {
  if (!(step_kev > 0.0)) throw ValidationError("energy step must be positive");
  if (!(last_kev > first_kev)) throw ValidationError("energy grid needs last > first");
  const auto n = static_cast<std::size_t>(std::llround((last_kev - first_kev) / step_kev)) + 1;
  energies_.resize(n);
  for (std::size_t i = 0; i < n; ++i) energies_[i] = first_kev + step_kev * double(i);
  delta_ = step_kev;
}

EnergyGrid::EnergyGrid(std::vector<double> energies_kev) : energies_(std::move(energies_kev)) {
  if (energies_.size() < 2) throw ValidationError("energy grid needs at least two nodes");
  delta_ = energies_[1] - energies_[0];
  if (!(delta_ > 0.0)) throw ValidationError("energy grid must be strictly increasing");
  for (std::size_t i = 1; i < energies_.size(); ++i) {
    const double d = energies_[i] - energies_[i - 1];
    if (!(d > 0.0)) throw ValidationError("energy grid must be strictly increasing");
    if (std::abs(d - delta_) > 1e-9 * delta_) throw ValidationError("energy grid must be uniform");
  }
}

std::size_t EnergyGrid::nearest(double energy_kev) const {
  const double pos = (energy_kev - energies_.front()) / delta_;
  const long idx = std::lround(pos);
  return static_cast<std::size_t>(std::clamp<long>(idx, 0, long(energies_.size()) - 1));
}

std::vector<std::vector<double>> load_table(const std::filesystem::path& path,
                                            const EnergyGrid& grid) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open table '" + path.string() + "'");

  std::vector<double> energy;
  std::vector<std::vector<double>> columns;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::vector<double> row;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("non-numeric field '" + tok + "' in '" + path.string() + "'", line_no);
      }
    }
    if (row.size() < 2 || row.size() > 3)
      throw ParseError("expected 2 or 3 columns in '" + path.string() + "'", line_no);
    if (columns.empty()) columns.resize(row.size() - 1);
    if (row.size() - 1 != columns.size())
      throw ParseError("inconsistent column count in '" + path.string() + "'", line_no);
    if (!energy.empty() && !(row[0] > energy.back()))
      throw ParseError("energies must be strictly increasing", line_no);
    energy.push_back(row[0]);
    for (std::size_t c = 0; c < columns.size(); ++c) columns[c].push_back(row[c + 1]);
  }
  if (energy.size() < 2) throw ParseError("table '" + path.string() + "' has fewer than two rows", line_no);
  const double tol = 1e-9 * grid.delta();
  if (energy.front() > grid.front() + tol || energy.back() < grid.back() - tol)
    throw RangeError("table '" + path.string() + "' does not cover the energy grid");

  std::vector<std::vector<double>> out(columns.size(), std::vector<double>(grid.size()));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double e = grid.energies()[g];
    auto it = std::upper_bound(energy.begin(), energy.end(), e);
    std::size_t hi = std::clamp<std::size_t>(it - energy.begin(), 1, energy.size() - 1);
    std::size_t lo = hi - 1;
    if (std::abs(energy[lo] - e) <= tol) hi = lo;
    else if (std::abs(energy[hi] - e) <= tol) lo = hi;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (lo == hi) {
        out[c][g] = columns[c][lo];
      } else {
        const double f = (e - energy[lo]) / (energy[hi] - energy[lo]);
        out[c][g] = (1.0 - f) * columns[c][lo] + f * columns[c][hi];
      }
    }
  }
  return out;
}

namespace {

void normalize_row(std::vector<double>& row, const std::string& what) {
  for (double v : row)
    if (!(v >= 0.0)) throw ValidationError(what + " has a negative or non-finite entry");
  const double sum = std::accumulate(row.begin(), row.end(), 0.0);
  if (!(sum > 0.0)) throw ValidationError(what + " is identically zero on the grid");
  for (double& v : row) v /= sum;
}

void check_basis_row(const std::vector<double>& row) {
  for (double v : row)
    if (!(v > 0.0) || !std::isfinite(v))
      throw ValidationError("basis attenuation must be positive and finite");
}

void check_independent(const MaterialBasis& b) {
  double g11 = 0, g12 = 0, g22 = 0;
  for (std::size_t i = 0; i < b.grid.size(); ++i) {
    g11 += b.phi[0][i] * b.phi[0][i];
    g12 += b.phi[0][i] * b.phi[1][i];
    g22 += b.phi[1][i] * b.phi[1][i];
  }
  const double det = g11 * g22 - g12 * g12;
  if (!(det > 1e-14 * g11 * g22))
    throw ValidationError("basis materials are linearly dependent on the grid");
}

}  // namespace

Spectrum load_spectrum(const std::filesystem::path& path, const EnergyGrid& grid, double i0) {
  auto cols = load_table(path, grid);
  if (cols.size() != 2) throw ParseError("spectrum table needs three columns", 0);
  Spectrum s{grid, {std::move(cols[0]), std::move(cols[1])}, i0};
  normalize_row(s.weights[0], "spectrum row 1");
  normalize_row(s.weights[1], "spectrum row 2");
  return s;
}

Spectrum load_spectrum(const std::filesystem::path& low, const std::filesystem::path& high,
                       const EnergyGrid& grid, double i0) {
  auto a = load_table(low, grid);
  auto b = load_table(high, grid);
  if (a.size() != 1 || b.size() != 1) throw ParseError("per-source spectrum tables need two columns", 0);
  Spectrum s{grid, {std::move(a[0]), std::move(b[0])}, i0};
  normalize_row(s.weights[0], "spectrum row 1");
  normalize_row(s.weights[1], "spectrum row 2");
  return s;
}

MaterialBasis load_basis(const std::filesystem::path& path, const EnergyGrid& grid) {
  auto cols = load_table(path, grid);
  if (cols.size() != 2) throw ParseError("basis table needs three columns", 0);
  MaterialBasis b{grid, {std::move(cols[0]), std::move(cols[1])}};
  check_basis_row(b.phi[0]);
  check_basis_row(b.phi[1]);
  check_independent(b);
  return b;
}

MaterialBasis load_basis(const std::filesystem::path& first, const std::filesystem::path& second,
                         const EnergyGrid& grid) {
  auto a = load_table(first, grid);
  auto b = load_table(second, grid);
  if (a.size() != 1 || b.size() != 1) throw ParseError("per-material basis tables need two columns", 0);
  MaterialBasis basis{grid, {std::move(a[0]), std::move(b[0])}};
  check_basis_row(basis.phi[0]);
  check_basis_row(basis.phi[1]);
  check_independent(basis);
  return basis;
}

void save_table(const std::filesystem::path& path, const EnergyGrid& grid,
                const std::array<std::vector<double>, 2>& rows, const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write table '" + path.string() + "'");
  out << "# " << comment << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < grid.size(); ++i)
    out << grid.energies()[i] << ' ' << rows[0][i] << ' ' << rows[1][i] << '\n';
  if (!out) throw IoError("failed writing table '" + path.string() + "'");
}

SpectrumKind parse_spectrum_kind(const std::string& name) {
  if (name == "delta-pair") return SpectrumKind::DeltaPair;
  if (name == "triangular-pair") return SpectrumKind::TriangularPair;
  throw ValidationError("unknown spectrum kind '" + name + "'");
}

Spectrum make_synthetic_spectrum(SpectrumKind kind, const EnergyGrid& grid, double i0,
                                 const SyntheticSpectrumOptions& options) {
  if (!(i0 > 0.0)) throw ValidationError("i0 must be positive");
  Spectrum s{grid, {std::vector<double>(grid.size(), 0.0), std::vector<double>(grid.size(), 0.0)}, i0};
  for (int k = 0; k < kSources; ++k) {
    if (kind == SpectrumKind::DeltaPair) {
      const std::size_t node = grid.nearest(options.delta_kev[k]);
      if (std::abs(grid.energies()[node] - options.delta_kev[k]) > 1e-9 * grid.delta()) {
        std::ostringstream msg;
        msg << "delta energy " << options.delta_kev[k] << " keV is off-grid; snapped to "
            << grid.energies()[node] << " keV";
        log_warning(msg.str());
      }
      s.weights[k][node] = 1.0;
    } else {
      const double lo = options.tri_low_kev[k];
      const double peak = options.tri_peak_kev[k];
      const double hi = options.tri_high_kev[k];
      if (!(lo < peak && peak < hi)) throw ValidationError("triangular spectrum needs low < peak < high");
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const double e = grid.energies()[i];
        double w = 0.0;
        if (e > lo && e <= peak) w = (e - lo) / (peak - lo);
        else if (e > peak && e < hi) w = (hi - e) / (hi - peak);
        s.weights[k][i] = w;
      }
      normalize_row(s.weights[k], "triangular spectrum");
    }
  }
  return s;
}

namespace {

// Klein-Nishina total cross-section up to a constant factor.
double klein_nishina(double energy_kev) {
  const double e = energy_kev / 510.998950;
  const double l = std::log1p(2.0 * e);
  return (1.0 + e) / (e * e) * (2.0 * (1.0 + e) / (1.0 + 2.0 * e) - l / e) + l / (2.0 * e) -
         (1.0 + 3.0 * e) / ((1.0 + 2.0 * e) * (1.0 + 2.0 * e));
}

}  // namespace

MaterialBasis make_synthetic_basis(const EnergyGrid& grid) {
  // cm^2/g at the 30 keV reference: photoelectric and Compton parts
  constexpr std::array<double, 2> photo{0.12, 0.26};
  constexpr std::array<double, 2> compton{0.19, 0.20};
  const double kn_ref = klein_nishina(30.0);
  MaterialBasis b{grid, {std::vector<double>(grid.size()), std::vector<double>(grid.size())}};
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double e = grid.energies()[i];
    const double pe = std::pow(30.0 / e, 3.0);
    const double cs = klein_nishina(e) / kn_ref;
    for (int m = 0; m < kMaterials; ++m) b.phi[m][i] = 1e-3 * (photo[m] * pe + compton[m] * cs);
  }
  return b;
}

namespace {

void check_same_grid(const Spectrum& s, const MaterialBasis& b) {
  if (!(s.grid == b.grid)) throw DimensionError("spectrum and basis use different energy grids");
}

}  // namespace

std::array<double, 2> expected_counts(std::array<double, 2> p, const Spectrum& spectrum,
                                      const MaterialBasis& basis) {
  check_same_grid(spectrum, basis);
  std::array<double, 2> counts{0.0, 0.0};
  for (std::size_t i = 0; i < spectrum.grid.size(); ++i) {
    const double att = std::exp(-(p[0] * basis.phi[0][i] + p[1] * basis.phi[1][i]));
    counts[0] += spectrum.weights[0][i] * att;
    counts[1] += spectrum.weights[1][i] * att;
  }
  counts[0] *= spectrum.i0;
  counts[1] *= spectrum.i0;
  return counts;
}

std::array<std::vector<double>, 2> expected_counts(const MaterialSinogram& p,
                                                   const Spectrum& spectrum,
                                                   const MaterialBasis& basis) {
  check_same_grid(spectrum, basis);
  const std::size_t n = p.rays();
  if (p.p[0].size() != n || p.p[1].size() != n)
    throw DimensionError("material sinogram channels do not match its geometry");
  std::array<std::vector<double>, 2> out{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    const auto c = expected_counts(std::array<double, 2>{p.p[0][r], p.p[1][r]}, spectrum, basis);
    out[0][r] = c[0];
    out[1][r] = c[1];
  }
  return out;
}

std::array<double, 2> forward_map(std::array<double, 2> p, const Spectrum& spectrum,
                                  const MaterialBasis& basis) {
  const auto c = expected_counts(p, spectrum, basis);
  return {-std::log(c[0] / spectrum.i0), -std::log(c[1] / spectrum.i0)};
}

EnergySinogram simulate(const MaterialImage& x, const Projector& projector,
                        const Spectrum& spectrum, const MaterialBasis& basis, std::uint64_t seed,
                        SimulationReport* report) {
  const Geometry& g = projector.geometry();
  if (!(x.shape == g.image)) throw DimensionError("simulate: image shape does not match geometry");
  for (double v : x.densities)
    if (!(v >= 0.0)) throw ValidationError("simulate: material image must be nonnegative");

  MaterialSinogram p{g.n_angles, g.n_detectors, {}};
  for (int m = 0; m < kMaterials; ++m) p.p[m] = projector.forward(x.channel(m));
  const auto mean = expected_counts(p, spectrum, basis);

  constexpr double kFloor = 1.0;
  EnergySinogram out = EnergySinogram::zeros(g.n_angles, g.n_detectors);
  std::size_t clamped = 0;
  for (std::size_t r = 0; r < out.rays(); ++r) {
    std::mt19937_64 engine(ray_stream_seed(seed, r));
    for (int k = 0; k < kSources; ++k) {
      double count = 0.0;
      if (mean[k][r] > 0.0) {
        std::poisson_distribution<long long> draw(mean[k][r]);
        count = static_cast<double>(draw(engine));
      }
      if (count < kFloor) {
        count = kFloor;
        ++clamped;
      }
      out.y[k][r] = -std::log(count / spectrum.i0);
      out.weights[k][r] = count;
    }
  }
  if (report) report->clamped = clamped;
  return out;
}

EnergySinogram measure_noiseless(const MaterialSinogram& p, const Spectrum& spectrum,
                                 const MaterialBasis& basis) {
  const auto mean = expected_counts(p, spectrum, basis);
  EnergySinogram out = EnergySinogram::zeros(p.n_angles, p.n_detectors);
  for (std::size_t r = 0; r < out.rays(); ++r) {
    for (int k = 0; k < kSources; ++k) {
      const double c = std::max(mean[k][r], std::numeric_limits<double>::min());
      out.y[k][r] = -std::log(c / spectrum.i0);
      out.weights[k][r] = c;
    }
  }
  return out;
}

}  // namespace dualct
