#include "dualct/harness.hpp"

#include <fcntl.h>
#include <png.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include "dualct/decomp.hpp"
#include "dualct/denoiser.hpp"
#include "dualct/error.hpp"
#include "dualct/io.hpp"
#include "dualct/log.hpp"
#include "dualct/metrics.hpp"
#include "dualct/phantom.hpp"
#include "dualct/rng.hpp"
#include "dualct/spectral.hpp"

namespace dualct {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- config

fs::path ExperimentConfig::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

void ExperimentConfig::validate() const {
  if (angles.empty()) throw ConfigError("config: angle list is empty");
  for (int a : angles)
    if (a < 2) throw ConfigError("config: every angle count must be at least 2");
  for (int a : train_angles)
    if (a < 2) throw ConfigError("config: every training angle count must be at least 2");
  if (image.width < 1 || image.height < 1 || !(image.pixel_size > 0.0))
    throw ConfigError("config: image shape must be positive");
  if (n_detectors < 1) throw ConfigError("config: n_detectors must be positive");
  if (!(i0 > 0.0)) throw ConfigError("config: i0 must be positive");
  if (train_phantoms < 0 || test_phantoms < 0) throw ConfigError("config: phantom counts must be nonnegative");
  if (test_phantoms == 0 && test_phantom_files.empty()) throw ConfigError("config: the test set is empty");
  if (degree_i < 0 || degree_j < 0) throw ConfigError("config: polynomial degrees must be nonnegative");
  if (calibration_nodes < 2) throw ConfigError("config: calibration needs at least 2 nodes per axis");
  if (!(calibration_margin >= 1.0)) throw ConfigError("config: calibration margin must be at least 1");
  if (!(energy_grid[2] > 0.0) || !(energy_grid[1] > energy_grid[0]))
    throw ConfigError("config: energy grid needs first < last and a positive step");
  if (hidden.empty()) throw ConfigError("config: denoiser needs at least one hidden layer");
  for (int h : hidden)
    if (h < 1) throw ConfigError("config: hidden widths must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("config: kernel size must be odd");
  if (!(channel_scale[0] > 0.0) || !(channel_scale[1] > 0.0))
    throw ConfigError("config: channel_scale must be positive");
  recon.validate();
  train.validate();
  if (spectrum_file.empty()) {
    try {
      parse_spectrum_kind(spectrum_kind);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  for (const fs::path& p : {spectrum_file, basis_file})
    if (!p.empty() && !fs::exists(resolve(p))) throw DependencyError("missing input file " + resolve(p).string());
  for (const fs::path& p : test_phantom_files)
    if (!fs::exists(resolve(p))) throw DependencyError("missing phantom file " + resolve(p).string());
}

namespace {

class Keys {
 public:
  Keys(const json& object, std::string where) : object_(object), where_(std::move(where)) {
    if (!object_.is_object()) throw ConfigError("config: '" + where_ + "' must be an object");
  }
  ~Keys() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& item : object_.items())
      if (!seen_.count(item.key())) throw ConfigError("config: unknown key '" + item.key() + "' in " + where_);
  }
  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = object_.find(key);
    return it == object_.end() ? nullptr : &*it;
  }
  template <typename T>
  void read(const std::string& key, T& out) {
    if (const json* v = find(key)) {
      try {
        out = v->get<T>();
      } catch (const json::exception&) {
        throw ConfigError("config: '" + key + "' in " + where_ + " has the wrong type");
      }
    }
  }

 private:
  const json& object_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_path(Keys& keys, const std::string& key, fs::path& out) {
  std::string s;
  keys.read(key, s);
  if (!s.empty()) out = s;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  {
    Keys top(root, "config");
    read_path(top, "output_dir", c.output_dir);
    top.read("seed", c.seed);
    top.read("i0", c.i0);
    top.read("angles", c.angles);
    top.read("export_png", c.export_png);
    if (const json* g = top.find("energy_grid")) {
      Keys k(*g, "energy_grid");
      k.read("first", c.energy_grid[0]);
      k.read("last", c.energy_grid[1]);
      k.read("step", c.energy_grid[2]);
    }
    if (const json* s = top.find("spectrum")) {
      Keys k(*s, "spectrum");
      k.read("kind", c.spectrum_kind);
      read_path(k, "file", c.spectrum_file);
    }
    if (const json* b = top.find("basis")) {
      Keys k(*b, "basis");
      read_path(k, "file", c.basis_file);
    }
    if (const json* g = top.find("geometry")) {
      Keys k(*g, "geometry");
      k.read("width", c.image.width);
      k.read("height", c.image.height);
      k.read("pixel_size", c.image.pixel_size);
      k.read("n_detectors", c.n_detectors);
      k.read("detector_spacing", c.detector_spacing);
      std::string model = "joseph";
      k.read("ray_model", model);
      try {
        c.ray_model = parse_ray_model(model);
      } catch (const ValidationError& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
    if (const json* p = top.find("phantoms")) {
      Keys k(*p, "phantoms");
      k.read("train", c.train_phantoms);
      k.read("test", c.test_phantoms);
      std::vector<std::string> files;
      k.read("test_files", files);
      for (auto& f : files) c.test_phantom_files.emplace_back(f);
      if (!files.empty()) c.test_phantoms = 0;
    }
    if (const json* d = top.find("decomp")) {
      Keys k(*d, "decomp");
      k.read("degree_i", c.degree_i);
      k.read("degree_j", c.degree_j);
      k.read("nodes", c.calibration_nodes);
      k.read("margin", c.calibration_margin);
      k.read("count_weighted", c.count_weighted);
    }
    if (const json* r = top.find("recon")) {
      Keys k(*r, "recon");
      k.read("lambda", c.recon.lambda);
      k.read("lambda_factor", c.recon.lambda_factor);
      k.read("k_outer", c.recon.k_outer);
      k.read("cg_max_iter", c.recon.cg_max_iter);
      k.read("cg_rel_tol", c.recon.cg_rel_tol);
      std::string filter = "hann";
      k.read("fbp_filter", filter);
      try {
        c.fbp_filter = parse_fbp_filter(filter);
      } catch (const ValidationError& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
    if (const json* t = top.find("train")) {
      Keys k(*t, "train");
      k.read("epochs", c.train.epochs);
      k.read("batch_size", c.train.batch_size);
      k.read("learning_rate", c.train.learning_rate);
      k.read("momentum", c.train.momentum);
      k.read("normalize_gradient", c.train.normalize_gradient);
      k.read("angles", c.train_angles);
      k.read("hidden", c.hidden);
      k.read("kernel", c.kernel);
      k.read("channel_scale", c.channel_scale);
    }
  }
  c.train.seed = c.seed;
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  fs::path base = path.parent_path();
  if (base.empty()) base = ".";
  return parse_config(text.str(), base);
}

// -------------------------------------------------------------- manifest

const std::string& ManifestEntry::field(const std::string& key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return v;
  throw ValidationError("manifest entry " + path + " has no field '" + key + "'");
}

bool ManifestEntry::has(const std::string& key) const {
  return std::any_of(fields.begin(), fields.end(), [&](const auto& kv) { return kv.first == key; });
}

fs::path manifest_path(const fs::path& out_dir) { return out_dir / "manifest.txt"; }

namespace {

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestEntry e;
    if (!(fields >> e.stage >> e.kind >> e.path)) throw ParseError("manifest: short line", line_no);
    std::string kv;
    while (fields >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ParseError("manifest: field without '='", line_no);
      e.fields.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string format_entry(const ManifestEntry& e) {
  std::string line = e.stage + " " + e.kind + " " + e.path;
  for (const auto& [k, v] : e.fields) line += " " + k + "=" + v;
  return line;
}

// Holds an exclusive flock on a file for the lifetime of the object.
class LockedFile {
 public:
  explicit LockedFile(const fs::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw IoError("cannot open " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + path.string());
    }
  }
  ~LockedFile() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  LockedFile(const LockedFile&) = delete;
  LockedFile& operator=(const LockedFile&) = delete;

  std::string read_all() const {
    std::string text;
    char buf[4096];
    ::lseek(fd_, 0, SEEK_SET);
    for (;;) {
      const ssize_t n = ::read(fd_, buf, sizeof buf);
      if (n < 0) throw IoError("cannot read " + path_.string());
      if (n == 0) break;
      text.append(buf, static_cast<std::size_t>(n));
    }
    return text;
  }
  void write_all(const std::string& text) const {
    if (::ftruncate(fd_, 0) != 0) throw IoError("cannot truncate " + path_.string());
    ::lseek(fd_, 0, SEEK_SET);
    std::size_t done = 0;
    while (done < text.size()) {
      const ssize_t n = ::write(fd_, text.data() + done, text.size() - done);
      if (n <= 0) throw IoError("cannot write " + path_.string());
      done += static_cast<std::size_t>(n);
    }
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

}  // namespace

Manifest Manifest::load(const fs::path& file) {
  Manifest m;
  if (!fs::exists(file)) return m;
  LockedFile locked(file);
  m.entries_ = parse_manifest(locked.read_all());
  return m;
}

void Manifest::replace_stage(const fs::path& file, const std::string& stage,
                             const std::vector<ManifestEntry>& entries) {
  LockedFile locked(file);
  std::vector<ManifestEntry> all = parse_manifest(locked.read_all());
  std::erase_if(all, [&](const ManifestEntry& e) { return e.stage == stage; });
  all.insert(all.end(), entries.begin(), entries.end());
  std::string text;
  for (const auto& e : all) text += format_entry(e) + "\n";
  locked.write_all(text);
}

std::vector<ManifestEntry> Manifest::select(const std::string& stage, const std::string& kind) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries_)
    if (e.stage == stage && e.kind == kind) out.push_back(e);
  return out;
}

const ManifestEntry& Manifest::require(const std::string& stage, const std::string& kind,
                                       const std::string& what) const {
  for (const auto& e : entries_)
    if (e.stage == stage && e.kind == kind) return e;
  throw DependencyError("missing upstream artifact: " + what + " (run " + stage + " first)");
}

// ---------------------------------------------------------------- stages

namespace {

constexpr std::uint64_t kTrainSet = 0x747261696eULL;
constexpr std::uint64_t kTestSet = 0x74657374ULL;

std::string index_name(const std::string& set, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", set.c_str(), index);
  return buf;
}

std::string sweep_name(const std::string& set, int index, int angles) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%03d_a%03d", set.c_str(), index, angles);
  return buf;
}

void ensure_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!(out << "ok")) throw IoError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

void require_file(const fs::path& stem_or_file, const fs::path& check) {
  if (!fs::exists(check)) throw DependencyError("missing upstream artifact: " + stem_or_file.string());
}

Manifest load_manifest_of(const ExperimentConfig& config) {
  const fs::path file = manifest_path(config.out());
  if (!fs::exists(file)) throw DependencyError("missing manifest " + file.string() + " (run simulate first)");
  return Manifest::load(file);
}

EnergyGrid grid_of(const ExperimentConfig& config) {
  return EnergyGrid(config.energy_grid[0], config.energy_grid[1], config.energy_grid[2]);
}

Geometry geometry_of(const ExperimentConfig& config, int n_angles) {
  return Geometry::parallel(config.image, n_angles, config.n_detectors, config.detector_spacing);
}

// One projector per angle count, shared between samples.
class ProjectorCache {
 public:
  ProjectorCache(const ExperimentConfig& config) : config_(config) {}
  std::shared_ptr<const Projector> get(int n_angles) {
    auto& slot = cache_[n_angles];
    if (!slot) slot = std::make_shared<const Projector>(geometry_of(config_, n_angles), config_.ray_model);
    return slot;
  }

 private:
  const ExperimentConfig& config_;
  std::map<int, std::shared_ptr<const Projector>> cache_;
};

void check_sinogram(const EnergySinogram& y, const Projector& projector, const fs::path& stem) {
  const Geometry& g = projector.geometry();
  if (y.n_angles != g.n_angles || y.n_detectors != g.n_detectors)
    throw DimensionError("sinogram " + stem.string() + " does not match the configured geometry");
}

std::string fmt(double v) { return format_double(v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!(out << text)) throw IoError("cannot write " + path.string());
}

}  // namespace

StageSummary cmd_simulate(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out();
  ensure_writable(out);
  fs::create_directories(out / "truth");
  fs::create_directories(out / "sino");

  const EnergyGrid grid = grid_of(config);
  const Spectrum spectrum = config.spectrum_file.empty()
                                ? make_synthetic_spectrum(parse_spectrum_kind(config.spectrum_kind), grid, config.i0)
                                : load_spectrum(config.resolve(config.spectrum_file), grid, config.i0);
  const MaterialBasis basis =
      config.basis_file.empty() ? make_synthetic_basis(grid) : load_basis(config.resolve(config.basis_file), grid);
  save_table(out / "spectrum.txt", grid, spectrum.weights, "energy_kev source1 source2 (rows sum to 1)");
  save_table(out / "basis.txt", grid, basis.phi, "energy_kev material1 material2 (cm^2/mg)");

  StageSummary summary;
  summary.files_written = 2;
  std::vector<ManifestEntry> entries;
  entries.push_back({"simulate", "params", "-",
                     {{"seed", std::to_string(config.seed)},
                      {"i0", fmt(config.i0)},
                      {"spectrum", "spectrum.txt"},
                      {"basis", "basis.txt"}}});

  ProjectorCache projectors(config);
  auto run_set = [&](const std::string& set, std::uint64_t tag, int count, const std::vector<int>& angles,
                     const std::vector<fs::path>& files) {
    const int n = files.empty() ? count : static_cast<int>(files.size());
    for (int i = 0; i < n; ++i) {
      const std::uint64_t phantom_seed = ray_stream_seed(config.seed ^ tag, static_cast<std::uint64_t>(i));
      PhantomSpec spec;
      if (files.empty()) {
        spec = random_breast_phantom(phantom_seed, config.image);
      } else {
        std::ifstream in(config.resolve(files[i]));
        if (!in) throw IoError("cannot open phantom file " + config.resolve(files[i]).string());
        spec = parse_phantom_spec(in);
      }
      const MaterialImage truth = make_phantom(spec, config.image);
      const std::string truth_rel = "truth/" + index_name(set, i);
      save_image(out / truth_rel, truth);
      ++summary.files_written;
      entries.push_back({"simulate", "truth", truth_rel, {{"set", set}, {"index", std::to_string(i)}}});
      for (int a : angles) {
        const auto projector = projectors.get(a);
        SimulationReport rep;
        const EnergySinogram y =
            simulate(truth, *projector, spectrum, basis, ray_stream_seed(phantom_seed, static_cast<std::uint64_t>(a)),
                     &rep);
        const std::string sino_rel = "sino/" + sweep_name(set, i, a);
        save_sinogram(out / sino_rel, y, projector->geometry().detector_spacing, config.i0);
        ++summary.files_written;
        entries.push_back({"simulate",
                           "sinogram",
                           sino_rel,
                           {{"set", set},
                            {"index", std::to_string(i)},
                            {"angles", std::to_string(a)},
                            {"truth", truth_rel},
                            {"clamped", std::to_string(rep.clamped)}}});
        if (rep.clamped > 0)
          log_warning("simulate: " + std::to_string(rep.clamped) + " zero-count rays clamped in " + sino_rel);
      }
      log_info("simulate: " + set + " phantom " + std::to_string(i) + " done");
    }
  };
  run_set("train", kTrainSet, config.train_phantoms, config.training_angles(), {});
  run_set("test", kTestSet, config.test_phantoms, config.angles, config.test_phantom_files);

  Manifest::replace_stage(manifest_path(out), "simulate", entries);
  return summary;
}

StageSummary cmd_fit_decomp(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out();
  const Manifest manifest = load_manifest_of(config);
  const ManifestEntry& params = manifest.require("simulate", "params", "simulation parameters");
  const fs::path spectrum_file = out / params.field("spectrum");
  const fs::path basis_file = out / params.field("basis");
  require_file(spectrum_file, spectrum_file);
  require_file(basis_file, basis_file);

  const EnergyGrid grid = grid_of(config);
  const Spectrum spectrum = load_spectrum(spectrum_file, grid, std::stod(params.field("i0")));
  const MaterialBasis basis = load_basis(basis_file, grid);

  // calibration range: line integrals of the training truths, or of every
  // truth when there is no training set
  std::vector<ManifestEntry> truths;
  for (const auto& e : manifest.select("simulate", "truth"))
    if (e.field("set") == "train") truths.push_back(e);
  if (truths.empty()) truths = manifest.select("simulate", "truth");
  if (truths.empty()) throw DependencyError("missing upstream artifact: no ground-truth images in the manifest");
  const Projector survey(geometry_of(config, 32), config.ray_model);
  std::array<double, 2> p_max{0.0, 0.0};
  for (const auto& e : truths) {
    require_file(out / e.path, header_path(out / e.path));
    const MaterialImage truth = load_image(out / e.path);
    for (int c = 0; c < 2; ++c)
      for (double v : survey.forward(truth.channel(c))) p_max[c] = std::max(p_max[c], v);
  }
  for (double& v : p_max) v = std::max(v, 1.0) * config.calibration_margin;

  const CalibrationPair calibration = make_calibration(spectrum, basis, p_max, config.calibration_nodes);
  FitOptions options;
  options.count_weighted = config.count_weighted;
  FitReport report;
  const std::vector<CalibrationPair> pairs{calibration};
  const PolynomialDecomposer decomposer = fit(pairs, config.degree_i, config.degree_j, options, &report);

  fs::create_directories(out / "decomp");
  save_decomposer(out / "decomp/decomposer", decomposer);
  std::ostringstream rep;
  rep << "rays " << report.rays << "\n"
      << "condition_number " << fmt(report.condition_number) << "\n"
      << "rms_residual " << fmt(report.rms_residual[0]) << " " << fmt(report.rms_residual[1]) << "\n"
      << "p_max " << fmt(p_max[0]) << " " << fmt(p_max[1]) << "\n";
  write_text(out / "decomp/fit_report.txt", rep.str());
  log_info("fit-decomp: condition number " + fmt(report.condition_number));

  Manifest::replace_stage(manifest_path(out), "fit-decomp",
                          {{"fit-decomp",
                            "decomposer",
                            "decomp/decomposer",
                            {{"degree_i", std::to_string(config.degree_i)},
                             {"degree_j", std::to_string(config.degree_j)},
                             {"condition", fmt(report.condition_number)}}},
                           {"fit-decomp", "report", "decomp/fit_report.txt", {}}});
  return {2};
}

StageSummary cmd_train(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out();
  const Manifest manifest = load_manifest_of(config);
  const ManifestEntry& dec_entry = manifest.require("fit-decomp", "decomposer", "decomposition model");
  require_file(out / dec_entry.path, header_path(out / dec_entry.path));
  const PolynomialDecomposer decomposer = load_decomposer(out / dec_entry.path);

  const std::vector<int>& angles = config.training_angles();
  ProjectorCache projectors(config);
  std::vector<TrainingSample> dataset;
  for (const auto& e : manifest.select("simulate", "sinogram")) {
    if (e.field("set") != "train") continue;
    const int a = std::stoi(e.field("angles"));
    if (std::find(angles.begin(), angles.end(), a) == angles.end()) continue;
    require_file(out / e.path, header_path(out / e.path));
    require_file(out / e.field("truth"), header_path(out / e.field("truth")));
    TrainingSample s{load_sinogram(out / e.path), load_image(out / e.field("truth")), projectors.get(a)};
    check_sinogram(s.y, *s.projector, e.path);
    dataset.push_back(std::move(s));
  }
  if (dataset.empty())
    throw DependencyError("missing upstream artifact: no training sinograms for the configured angles");

  DenoiserParams rho = DenoiserParams::create(config.seed, config.hidden, config.kernel, config.channel_scale);
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  TrainReport report;
  rho = train(dataset, decomposer, std::move(rho), tc, config.recon, &report);

  fs::create_directories(out / "model");
  save_denoiser(out / "model/denoiser", rho);
  std::ostringstream log;
  log << "# epoch loss\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) log << e << " " << fmt(report.epoch_loss[e]) << "\n";
  write_text(out / "train_loss.txt", log.str());
  if (report.aborted) log_warning("train: stopped early on a non-finite loss");

  Manifest::replace_stage(manifest_path(out), "train",
                          {{"train",
                            "denoiser",
                            "model/denoiser",
                            {{"samples", std::to_string(dataset.size())},
                             {"epochs", std::to_string(report.epoch_loss.size() - 1)},
                             {"rejected", std::to_string(report.rejected_epochs)}}},
                           {"train", "loss", "train_loss.txt", {}}});
  return {2};
}

StageSummary cmd_reconstruct(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out();
  const Manifest manifest = load_manifest_of(config);
  const ManifestEntry& dec_entry = manifest.require("fit-decomp", "decomposer", "decomposition model");
  const ManifestEntry& rho_entry = manifest.require("train", "denoiser", "denoiser weights");
  require_file(out / dec_entry.path, header_path(out / dec_entry.path));
  require_file(out / rho_entry.path, header_path(out / rho_entry.path));
  const PolynomialDecomposer decomposer = load_decomposer(out / dec_entry.path);
  const DenoiserParams rho = load_denoiser(out / rho_entry.path);
  const Denoiser denoiser = [&rho](const MaterialImage& x) { return denoise(rho, x); };

  std::vector<ManifestEntry> sinograms;
  for (const auto& e : manifest.select("simulate", "sinogram"))
    if (e.field("set") == "test") sinograms.push_back(e);
  for (int a : config.angles) {
    const bool found = std::any_of(sinograms.begin(), sinograms.end(),
                                   [&](const ManifestEntry& e) { return std::stoi(e.field("angles")) == a; });
    if (!found) throw DependencyError("missing upstream artifact: no test sinogram at " + std::to_string(a) + " angles");
  }

  fs::create_directories(out / "recon");
  if (config.export_png) fs::create_directories(out / "png");
  ProjectorCache projectors(config);
  StageSummary summary;
  std::vector<ManifestEntry> entries;
  std::ostringstream runs;
  runs << "# index angles method lambda flagged_rays cg_iterations clamped\n";
  for (const auto& e : sinograms) {
    const int a = std::stoi(e.field("angles"));
    if (std::find(config.angles.begin(), config.angles.end(), a) == config.angles.end()) continue;
    require_file(out / e.path, header_path(out / e.path));
    const auto projector = projectors.get(a);
    const EnergySinogram y = load_sinogram(out / e.path);
    check_sinogram(y, *projector, e.path);
    const int index = std::stoi(e.field("index"));

    E2EReport rep;
    const MaterialImage e2e = e2e_decomp(y, decomposer, denoiser, *projector, config.recon, &rep);
    const MaterialImage baseline = fbp_decomp(y, decomposer, *projector, config.fbp_filter);
    int cg_iterations = 0;
    std::size_t clamped = 0;
    for (const auto& it : rep.iterations) {
      cg_iterations += it.cg[0].iterations + it.cg[1].iterations;
      clamped += it.clamped;
    }
    runs << index << " " << a << " e2e " << fmt(rep.lambda) << " " << rep.flagged_rays << " " << cg_iterations
         << " " << clamped << "\n";
    runs << index << " " << a << " fbp - 0 0 0\n";

    std::ostringstream kv;
    kv << "sinogram " << e.path << "\n"
       << "angles " << a << "\n"
       << "lambda " << fmt(rep.lambda) << "\n"
       << "flagged_rays " << rep.flagged_rays << "\n"
       << "k_outer " << rep.iterations.size() << "\n";
    for (std::size_t k = 0; k < rep.iterations.size(); ++k) {
      const DcReport& it = rep.iterations[k];
      for (int c = 0; c < 2; ++c) {
        const std::string key = "iter" + std::to_string(k) + "_m" + std::to_string(c + 1);
        kv << key << "_cg_iterations " << it.cg[c].iterations << "\n"
           << key << "_cg_residual " << fmt(it.cg[c].rel_residual) << "\n";
      }
      kv << "iter" << k << "_clamped " << it.clamped << "\n";
    }
    kv << "cg_iterations_total " << cg_iterations << "\n"
       << "clamped_total " << clamped << "\n";
    const std::string report_rel = "recon/" + sweep_name("test", index, a) + "_e2e_report.txt";
    write_text(out / report_rel, kv.str());
    ++summary.files_written;
    entries.push_back({"reconstruct", "run_report", report_rel, {{"angles", std::to_string(a)},
                                                                  {"index", std::to_string(index)}}});

    MaterialImage truth;
    if (config.export_png) truth = load_image(out / e.field("truth"));
    for (const auto& [method, image] : {std::pair<std::string, const MaterialImage*>{"e2e", &e2e},
                                        std::pair<std::string, const MaterialImage*>{"fbp", &baseline}}) {
      const std::string rel = "recon/" + sweep_name("test", index, a) + "_" + method;
      save_image(out / rel, *image);
      ++summary.files_written;
      entries.push_back({"reconstruct",
                         "image",
                         rel,
                         {{"method", method},
                          {"angles", std::to_string(a)},
                          {"index", std::to_string(index)},
                          {"truth", e.field("truth")}}});
      if (config.export_png) {
        for (int c = 0; c < 2; ++c) {
          const auto t = truth.channel(c);
          const double hi = t.empty() ? 1.0 : *std::max_element(t.begin(), t.end());
          const std::string png_rel = "png/" + sweep_name("test", index, a) + "_" + method + "_m" +
                                      std::to_string(c + 1) + ".png";
          write_png(out / png_rel, image->channel(c), config.image.width, config.image.height, 0.0,
                    hi > 0.0 ? hi : 1.0);
          ++summary.files_written;
        }
      }
    }
    log_info("reconstruct: " + e.path + " done");
  }
  write_text(out / "recon/runs.txt", runs.str());
  entries.push_back({"reconstruct", "report", "recon/runs.txt", {}});
  Manifest::replace_stage(manifest_path(out), "reconstruct", entries);
  return summary;
}

namespace {

std::string psnr_text(double v) { return std::isinf(v) ? std::string(v > 0 ? "inf" : "-inf") : fmt(v); }

}  // namespace

StageSummary cmd_evaluate(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = config.out();
  const Manifest manifest = load_manifest_of(config);
  const std::vector<ManifestEntry> images = manifest.select("reconstruct", "image");
  if (images.empty()) throw DependencyError("missing upstream artifact: no reconstructions (run reconstruct first)");

  struct Sum {
    std::array<double, 3> total{0.0, 0.0, 0.0};
    int count = 0;
  };
  std::map<std::pair<int, std::string>, Sum> table;
  std::ostringstream per_image;
  per_image << "index angles method material psnr_db\n";
  for (const auto& e : images) {
    require_file(out / e.path, header_path(out / e.path));
    require_file(out / e.field("truth"), header_path(out / e.field("truth")));
    const MaterialImage truth = load_image(out / e.field("truth"));
    const MaterialImage recon = load_image(out / e.path);
    const MaterialPsnr m = material_psnr(truth, recon);
    const int a = std::stoi(e.field("angles"));
    const std::string& method = e.field("method");
    const std::array<double, 3> v{m.channel[0], m.channel[1], m.mean};
    Sum& s = table[{a, method}];
    for (int k = 0; k < 3; ++k) s.total[k] += v[k];
    ++s.count;
    static const char* kMaterial[3] = {"1", "2", "mean"};
    for (int k = 0; k < 3; ++k)
      per_image << e.field("index") << " " << a << " " << method << " " << kMaterial[k] << " " << psnr_text(v[k])
                << "\n";
  }
  std::ostringstream metrics;
  metrics << "angles method material psnr_db\n";
  for (const auto& [key, s] : table) {
    static const char* kMaterial[3] = {"1", "2", "mean"};
    for (int k = 0; k < 3; ++k)
      metrics << key.first << " " << key.second << " " << kMaterial[k] << " " << psnr_text(s.total[k] / s.count)
              << "\n";
  }
  write_text(out / "metrics.txt", metrics.str());
  write_text(out / "metrics_per_image.txt", per_image.str());
  Manifest::replace_stage(manifest_path(out), "evaluate",
                          {{"evaluate", "metrics", "metrics.txt", {{"images", std::to_string(images.size())}}},
                           {"evaluate", "metrics_per_image", "metrics_per_image.txt", {}}});
  return {2};
}

std::vector<MetricRow> load_metrics(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<MetricRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream fields(line);
    MetricRow r;
    std::string value;
    if (!(fields >> r.angles >> r.method >> r.material >> value)) throw ParseError("metrics: short row", line_no);
    if (value == "inf")
      r.psnr_db = std::numeric_limits<double>::infinity();
    else if (value == "-inf")
      r.psnr_db = -std::numeric_limits<double>::infinity();
    else
      r.psnr_db = std::stod(value);
    rows.push_back(r);
  }
  return rows;
}

void write_png(const fs::path& path, std::span<const double> pixels, int width, int height, double lo,
               double hi) {
  if (pixels.size() != static_cast<std::size_t>(width) * height)
    throw DimensionError("write_png: pixel count does not match the shape");
  std::vector<unsigned char> bytes(pixels.size());
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double t = std::clamp((pixels[i] - lo) / span, 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(255.0 * t));
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  // row 0 of the image is the smallest y; put the largest y on top
  for (int r = height - 1; r >= 0; --r) png_write_row(png, bytes.data() + std::size_t(r) * width);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace dualct
