#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dualct/types.hpp"

namespace dualct {

class Projector;

/// Uniformly spaced energy samples in keV.
class EnergyGrid {
 public:
  EnergyGrid(double first_kev, double last_kev, double step_kev);
  /// Validates strict increase and uniform spacing.
  explicit EnergyGrid(std::vector<double> energies_kev);

  /// 20-120 keV in 1 keV steps.
  static EnergyGrid diagnostic() { return EnergyGrid(20.0, 120.0, 1.0); }

  const std::vector<double>& energies() const { return energies_; }
  double delta() const { return delta_; }
  std::size_t size() const { return energies_.size(); }
  double front() const { return energies_.front(); }
  double back() const { return energies_.back(); }
  std::size_t nearest(double energy_kev) const;

  bool operator==(const EnergyGrid& other) const { return energies_ == other.energies_; }

 private:
  std::vector<double> energies_;
  double delta_ = 0.0;
};

/// Photon fractions of the two sources. Each row sums to one; the total
/// photon count per ray is carried in `i0`.
struct Spectrum {
  EnergyGrid grid;
  std::array<std::vector<double>, kSources> weights;
  double i0 = 1e5;
};

/// Mass attenuation (cm^2/mg) of the two basis materials.
struct MaterialBasis {
  EnergyGrid grid;
  std::array<std::vector<double>, kMaterials> phi;
};

/// Reads a whitespace-separated (energy, value[, value]) table and
/// interpolates every value column linearly onto `grid`. Lines starting
/// with '#' are comments. Throws ParseError on malformed rows and
/// RangeError when the table does not cover the grid.
std::vector<std::vector<double>> load_table(const std::filesystem::path& path,
                                            const EnergyGrid& grid);

/// Three-column table (energy, source 1, source 2); rows renormalized.
Spectrum load_spectrum(const std::filesystem::path& path, const EnergyGrid& grid, double i0);
/// Two two-column tables, one per source.
Spectrum load_spectrum(const std::filesystem::path& low, const std::filesystem::path& high,
                       const EnergyGrid& grid, double i0);
MaterialBasis load_basis(const std::filesystem::path& path, const EnergyGrid& grid);
MaterialBasis load_basis(const std::filesystem::path& first, const std::filesystem::path& second,
                         const EnergyGrid& grid);

/// Writes a three-column table that load_spectrum/load_basis read back.
void save_table(const std::filesystem::path& path, const EnergyGrid& grid,
                const std::array<std::vector<double>, 2>& rows, const std::string& comment);

enum class SpectrumKind { DeltaPair, TriangularPair };

struct SyntheticSpectrumOptions {
  // delta-pair
  std::array<double, 2> delta_kev{50.0, 80.0};
  // triangular-pair: support [low, high] with apex per source
  std::array<double, 2> tri_low_kev{20.0, 25.0};
  std::array<double, 2> tri_peak_kev{40.0, 65.0};
  std::array<double, 2> tri_high_kev{80.0, 120.0};
};

SpectrumKind parse_spectrum_kind(const std::string& name);

/// Delta energies off the grid snap to the nearest node with a warning.
Spectrum make_synthetic_spectrum(SpectrumKind kind, const EnergyGrid& grid, double i0,
                                 const SyntheticSpectrumOptions& options = {});

/// Photoelectric + Compton mixtures standing in for adipose (material 1)
/// and fibroglandular tissue (material 2).
MaterialBasis make_synthetic_basis(const EnergyGrid& grid);

/// i0 * sum_E S_k(E) exp(-(p1 phi_1(E) + p2 phi_2(E))) for k = 1, 2.
std::array<double, 2> expected_counts(std::array<double, 2> p, const Spectrum& spectrum,
                                      const MaterialBasis& basis);
std::array<std::vector<double>, 2> expected_counts(const MaterialSinogram& p,
                                                   const Spectrum& spectrum,
                                                   const MaterialBasis& basis);

/// The exact forward map h(p) = -log(expected_counts(p) / i0).
std::array<double, 2> forward_map(std::array<double, 2> p, const Spectrum& spectrum,
                                  const MaterialBasis& basis);

struct SimulationReport {
  std::size_t clamped = 0;  // draws replaced by the one-count floor
};

/// Projects `x`, draws Poisson counts, and returns y = -log(max(I, 1) / i0)
/// with weights max(I, 1). Each ray owns an independent random stream
/// derived from (seed, ray index), so the result depends on nothing else.
EnergySinogram simulate(const MaterialImage& x, const Projector& projector,
                        const Spectrum& spectrum, const MaterialBasis& basis, std::uint64_t seed,
                        SimulationReport* report = nullptr);

/// Noiseless measurements of known material sinograms; weights = expected counts.
EnergySinogram measure_noiseless(const MaterialSinogram& p, const Spectrum& spectrum,
                                 const MaterialBasis& basis);

}  // namespace dualct
