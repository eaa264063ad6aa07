#include "dualct/dualct.h"

#include <algorithm>
#include <memory>
#include <string>

#include "dualct/error.hpp"
#include "dualct/harness.hpp"
#include "dualct/log.hpp"
#include "dualct/metrics.hpp"
#include "dualct/projector.hpp"

struct dualct_experiment {
  dualct::ExperimentConfig config;
};

struct dualct_projector {
  std::unique_ptr<dualct::Projector> projector;
};

namespace {

thread_local std::string last_error;

int fail(int code, const std::string& message) {
  last_error = message;
  return code;
}

// Maps the exception in flight to a status code.
int translate() {
  try {
    throw;
  } catch (const dualct::ConfigError& e) {
    return fail(DUALCT_ERR_CONFIG, e.what());
  } catch (const dualct::DependencyError& e) {
    return fail(DUALCT_ERR_DEPENDENCY, e.what());
  } catch (const dualct::DivergenceError& e) {
    return fail(DUALCT_ERR_DIVERGENCE, e.what());
  } catch (const dualct::DimensionError& e) {
    return fail(DUALCT_ERR_DIMENSION, e.what());
  } catch (const dualct::IoError& e) {
    return fail(DUALCT_ERR_IO, e.what());
  } catch (const dualct::ParseError& e) {
    return fail(DUALCT_ERR_PARSE, e.what());
  } catch (const dualct::RangeError& e) {
    return fail(DUALCT_ERR_RANGE, e.what());
  } catch (const dualct::ValidationError& e) {
    return fail(DUALCT_ERR_VALIDATION, e.what());
  } catch (const dualct::ConditioningError& e) {
    return fail(DUALCT_ERR_CONDITIONING, e.what());
  } catch (const dualct::InsufficientDataError& e) {
    return fail(DUALCT_ERR_INSUFFICIENT_DATA, e.what());
  } catch (const std::exception& e) {
    return fail(DUALCT_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(DUALCT_ERR_INTERNAL, "unknown error");
  }
}

template <typename F>
int guarded(F&& body) {
  try {
    body();
    last_error.clear();
    return DUALCT_OK;
  } catch (...) {
    return translate();
  }
}

int null_argument(const char* what) { return fail(DUALCT_ERR_INVALID_ARGUMENT, std::string(what) + " is null"); }

}  // namespace

extern "C" {

const char* dualct_last_error(void) { return last_error.c_str(); }

const char* dualct_version(void) { return "0.1.0"; }

void dualct_set_log_level(dualct_log_level level) {
  switch (level) {
    case DUALCT_LOG_QUIET:
      dualct::set_log_level(dualct::LogLevel::Quiet);
      break;
    case DUALCT_LOG_WARNING:
      dualct::set_log_level(dualct::LogLevel::Warning);
      break;
    default:
      dualct::set_log_level(dualct::LogLevel::Info);
  }
}

int dualct_experiment_load(const char* config_path, dualct_experiment** out) {
  if (!config_path) return null_argument("config_path");
  if (!out) return null_argument("out");
  *out = nullptr;
  return guarded([&] {
    auto exp = std::make_unique<dualct_experiment>();
    exp->config = dualct::load_config(config_path);
    *out = exp.release();
  });
}

int dualct_experiment_set_seed(dualct_experiment* exp, uint64_t seed) {
  if (!exp) return null_argument("experiment");
  exp->config.seed = seed;
  exp->config.train.seed = seed;
  return DUALCT_OK;
}

int dualct_experiment_set_output_dir(dualct_experiment* exp, const char* dir) {
  if (!exp) return null_argument("experiment");
  if (!dir) return null_argument("dir");
  // relative to the working directory, not the config
  return guarded([&] { exp->config.output_dir = std::filesystem::absolute(dir); });
}

int dualct_run_simulate(dualct_experiment* exp) {
  if (!exp) return null_argument("experiment");
  return guarded([&] { dualct::cmd_simulate(exp->config); });
}

int dualct_run_fit_decomp(dualct_experiment* exp) {
  if (!exp) return null_argument("experiment");
  return guarded([&] { dualct::cmd_fit_decomp(exp->config); });
}

int dualct_run_train(dualct_experiment* exp) {
  if (!exp) return null_argument("experiment");
  return guarded([&] { dualct::cmd_train(exp->config); });
}

int dualct_run_reconstruct(dualct_experiment* exp) {
  if (!exp) return null_argument("experiment");
  return guarded([&] { dualct::cmd_reconstruct(exp->config); });
}

int dualct_run_evaluate(dualct_experiment* exp) {
  if (!exp) return null_argument("experiment");
  return guarded([&] { dualct::cmd_evaluate(exp->config); });
}

void dualct_experiment_free(dualct_experiment* exp) { delete exp; }

int dualct_projector_create(int width, int height, double pixel_size, int n_angles, int n_detectors,
                            double detector_spacing, dualct_ray_model model, dualct_projector** out) {
  if (!out) return null_argument("out");
  *out = nullptr;
  if (model != DUALCT_JOSEPH && model != DUALCT_SIDDON)
    return fail(DUALCT_ERR_INVALID_ARGUMENT, "unknown ray model");
  return guarded([&] {
    const dualct::Geometry g =
        dualct::Geometry::parallel({width, height, pixel_size}, n_angles, n_detectors, detector_spacing);
    auto p = std::make_unique<dualct_projector>();
    p->projector = std::make_unique<dualct::Projector>(
        g, model == DUALCT_SIDDON ? dualct::RayModel::Siddon : dualct::RayModel::Joseph);
    *out = p.release();
  });
}

size_t dualct_projector_pixels(const dualct_projector* p) {
  return p ? p->projector->geometry().image.pixels() : 0;
}

size_t dualct_projector_rays(const dualct_projector* p) { return p ? p->projector->geometry().rays() : 0; }

int dualct_projector_forward(const dualct_projector* p, const double* image, size_t pixels, double* sinogram,
                             size_t rays) {
  if (!p) return null_argument("projector");
  if (!image || !sinogram) return null_argument("buffer");
  return guarded([&] { p->projector->forward({image, pixels}, {sinogram, rays}); });
}

int dualct_projector_back(const dualct_projector* p, const double* sinogram, size_t rays, double* image,
                          size_t pixels) {
  if (!p) return null_argument("projector");
  if (!image || !sinogram) return null_argument("buffer");
  return guarded([&] { p->projector->back({sinogram, rays}, {image, pixels}); });
}

int dualct_projector_fbp(const dualct_projector* p, const double* sinogram, size_t rays, dualct_fbp_filter filter,
                         double* image, size_t pixels) {
  if (!p) return null_argument("projector");
  if (!image || !sinogram) return null_argument("buffer");
  return guarded([&] {
    if (pixels != p->projector->geometry().image.pixels())
      throw dualct::DimensionError("fbp: image buffer does not match the geometry");
    const auto rec = dualct::fbp(*p->projector, {sinogram, rays},
                                 filter == DUALCT_HANN ? dualct::FbpFilter::Hann : dualct::FbpFilter::RamLak);
    std::copy(rec.begin(), rec.end(), image);
  });
}

void dualct_projector_free(dualct_projector* p) { delete p; }

int dualct_psnr(const double* truth, const double* estimate, size_t n, double* out) {
  if (!truth || !estimate || !out) return null_argument("buffer");
  return guarded([&] { *out = dualct::psnr({truth, n}, {estimate, n}); });
}

}  // extern "C"
