#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dualct/projector.hpp"
#include "dualct/recon.hpp"
#include "dualct/train.hpp"
#include "dualct/types.hpp"

namespace dualct {

/// Experiment description. Relative paths are resolved against the
/// directory holding the config file.
struct ExperimentConfig {
  std::filesystem::path base_dir = ".";
  std::filesystem::path output_dir = "out";

  // energy model
  std::array<double, 3> energy_grid{20.0, 120.0, 1.0};  // first, last, step (keV)
  std::string spectrum_kind = "triangular-pair";         // used when no spectrum file is given
  std::filesystem::path spectrum_file;                   // 3-column table
  std::filesystem::path basis_file;                      // 3-column table; synthetic basis if empty
  double i0 = 1e5;
  std::uint64_t seed = 1;

  // geometry
  ImageShape image{64, 64, 0.2};
  int n_detectors = 96;
  double detector_spacing = 0.0;
  RayModel ray_model = RayModel::Joseph;
  std::vector<int> angles{30, 60, 90, 180, 360, 512};

  // phantoms
  int train_phantoms = 8;
  int test_phantoms = 10;
  std::vector<std::filesystem::path> test_phantom_files;  // replace the random test set when given

  // decomposition calibration
  int degree_i = 3;
  int degree_j = 3;
  int calibration_nodes = 24;
  double calibration_margin = 1.1;
  bool count_weighted = true;

  ReconConfig recon;
  FbpFilter fbp_filter = FbpFilter::Hann;

  TrainConfig train;
  std::vector<int> train_angles;  // empty: same as `angles`
  std::vector<int> hidden{16, 16};
  int kernel = 3;
  std::array<double, 2> channel_scale{1000.0, 1000.0};

  bool export_png = false;

  /// Throws ConfigError on inconsistent values and DependencyError when a
  /// referenced input file is missing.
  void validate() const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::filesystem::path out() const { return resolve(output_dir); }
  const std::vector<int>& training_angles() const { return train_angles.empty() ? angles : train_angles; }
};

/// Parses a JSON config; unknown keys are rejected.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = ".");

/// One manifest line: `<stage> <kind> <path> key=value...`. The `params`
/// kind carries no path.
struct ManifestEntry {
  std::string stage;
  std::string kind;
  std::string path;
  std::vector<std::pair<std::string, std::string>> fields;

  const std::string& field(const std::string& key) const;
  bool has(const std::string& key) const;
};

class Manifest {
 public:
  static Manifest load(const std::filesystem::path& file);
  /// Replaces every entry of `stage` with `entries` under an exclusive
  /// file lock, leaving other stages untouched.
  static void replace_stage(const std::filesystem::path& file, const std::string& stage,
                            const std::vector<ManifestEntry>& entries);

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::vector<ManifestEntry> select(const std::string& stage, const std::string& kind) const;
  /// Throws DependencyError naming `what` when no such entry exists.
  const ManifestEntry& require(const std::string& stage, const std::string& kind, const std::string& what) const;

 private:
  std::vector<ManifestEntry> entries_;
};

std::filesystem::path manifest_path(const std::filesystem::path& out_dir);

struct StageSummary {
  std::size_t files_written = 0;
};

StageSummary cmd_simulate(const ExperimentConfig& config);
StageSummary cmd_fit_decomp(const ExperimentConfig& config);
StageSummary cmd_train(const ExperimentConfig& config);
StageSummary cmd_reconstruct(const ExperimentConfig& config);
StageSummary cmd_evaluate(const ExperimentConfig& config);

struct MetricRow {
  int angles = 0;
  std::string method;
  std::string material;  // "1", "2" or "mean"
  double psnr_db = 0.0;
};

/// Reads the metrics table written by cmd_evaluate.
std::vector<MetricRow> load_metrics(const std::filesystem::path& file);

/// Writes an 8-bit grayscale preview, linearly windowed to [lo, hi].
void write_png(const std::filesystem::path& path, std::span<const double> pixels, int width, int height,
               double lo, double hi);

}  // namespace dualct
