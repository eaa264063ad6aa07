#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "dualct/dualct.h"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

// Status codes outside the documented exit set collapse to 1.
int exit_code(int status) {
  switch (status) {
    case DUALCT_OK:
    case DUALCT_ERR_CONFIG:
    case DUALCT_ERR_DEPENDENCY:
    case DUALCT_ERR_DIVERGENCE:
      return status;
    default:
      return 1;
  }
}

int run(const Options& opt, int (*stage)(dualct_experiment*)) {
  dualct_experiment* exp = nullptr;
  int status = dualct_experiment_load(opt.config.c_str(), &exp);
  if (status == DUALCT_OK && opt.seed) status = dualct_experiment_set_seed(exp, *opt.seed);
  if (status == DUALCT_OK && !opt.out.empty()) status = dualct_experiment_set_output_dir(exp, opt.out.c_str());
  if (status == DUALCT_OK) status = stage(exp);
  if (status != DUALCT_OK) std::fprintf(stderr, "dualct: error: %s\n", dualct_last_error());
  dualct_experiment_free(exp);
  return exit_code(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-energy CT material decomposition experiments"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  bool verbose = false;
  bool quiet = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages");
  app.add_flag("-q,--quiet", quiet, "Suppress warnings");

  const std::map<std::string, std::pair<std::string, int (*)(dualct_experiment*)>> stages{
      {"simulate", {"Simulate phantoms and noisy dual-energy sinograms", dualct_run_simulate}},
      {"fit-decomp", {"Fit the polynomial sinogram decomposition", dualct_run_fit_decomp}},
      {"train", {"Train the denoiser through the unrolled reconstruction", dualct_run_train}},
      {"reconstruct", {"Reconstruct test sinograms with both methods", dualct_run_reconstruct}},
      {"evaluate", {"Write PSNR tables", dualct_run_evaluate}},
  };
  Options opt;
  int (*chosen)(dualct_experiment*) = nullptr;
  for (const auto& [name, info] : stages) {
    CLI::App* sub = app.add_subcommand(name, info.first);
    sub->add_option("--config", opt.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Override the config seed");
    sub->add_option("--out", opt.out, "Output directory (overrides the config)");
    auto fn = info.second;
    sub->callback([&chosen, fn] { chosen = fn; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  dualct_set_log_level(quiet ? DUALCT_LOG_QUIET : verbose ? DUALCT_LOG_INFO : DUALCT_LOG_WARNING);
  return run(opt, chosen);
}
