/* C interface to the dual-energy CT decomposition library. Every call
 * returns a status code; on failure dualct_last_error() describes it. */
#ifndef DUALCT_DUALCT_H
#define DUALCT_DUALCT_H

#include <stddef.h>
#include <stdint.h>

#if defined(DUALCT_BUILDING_LIBRARY)
#define DUALCT_API __attribute__((visibility("default")))
#else
#define DUALCT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dualct_status {
  DUALCT_OK = 0,
  DUALCT_ERR_INTERNAL = 1,
  DUALCT_ERR_CONFIG = 2,
  DUALCT_ERR_DEPENDENCY = 3,
  DUALCT_ERR_DIVERGENCE = 4,
  DUALCT_ERR_DIMENSION = 5,
  DUALCT_ERR_IO = 6,
  DUALCT_ERR_PARSE = 7,
  DUALCT_ERR_RANGE = 8,
  DUALCT_ERR_VALIDATION = 9,
  DUALCT_ERR_CONDITIONING = 10,
  DUALCT_ERR_INSUFFICIENT_DATA = 11,
  DUALCT_ERR_INVALID_ARGUMENT = 12
} dualct_status;

typedef enum dualct_log_level { DUALCT_LOG_QUIET = 0, DUALCT_LOG_WARNING = 1, DUALCT_LOG_INFO = 2 } dualct_log_level;

typedef enum dualct_ray_model { DUALCT_JOSEPH = 0, DUALCT_SIDDON = 1 } dualct_ray_model;
typedef enum dualct_fbp_filter { DUALCT_RAM_LAK = 0, DUALCT_HANN = 1 } dualct_fbp_filter;

typedef struct dualct_experiment dualct_experiment;
typedef struct dualct_projector dualct_projector;

/* Message of the last failed call on this thread; never NULL. */
DUALCT_API const char* dualct_last_error(void);
DUALCT_API const char* dualct_version(void);
DUALCT_API void dualct_set_log_level(dualct_log_level level);

/* Experiments */
DUALCT_API int dualct_experiment_load(const char* config_path, dualct_experiment** out);
DUALCT_API int dualct_experiment_set_seed(dualct_experiment* exp, uint64_t seed);
DUALCT_API int dualct_experiment_set_output_dir(dualct_experiment* exp, const char* dir);
DUALCT_API int dualct_run_simulate(dualct_experiment* exp);
DUALCT_API int dualct_run_fit_decomp(dualct_experiment* exp);
DUALCT_API int dualct_run_train(dualct_experiment* exp);
DUALCT_API int dualct_run_reconstruct(dualct_experiment* exp);
DUALCT_API int dualct_run_evaluate(dualct_experiment* exp);
DUALCT_API void dualct_experiment_free(dualct_experiment* exp);

/* Parallel-beam projector over a width x height image (row-major, x
 * fastest). detector_spacing <= 0 spans the image diagonal. */
DUALCT_API int dualct_projector_create(int width, int height, double pixel_size, int n_angles, int n_detectors,
                                       double detector_spacing, dualct_ray_model model, dualct_projector** out);
DUALCT_API size_t dualct_projector_pixels(const dualct_projector* p);
DUALCT_API size_t dualct_projector_rays(const dualct_projector* p);
DUALCT_API int dualct_projector_forward(const dualct_projector* p, const double* image, size_t pixels,
                                        double* sinogram, size_t rays);
DUALCT_API int dualct_projector_back(const dualct_projector* p, const double* sinogram, size_t rays,
                                     double* image, size_t pixels);
DUALCT_API int dualct_projector_fbp(const dualct_projector* p, const double* sinogram, size_t rays,
                                    dualct_fbp_filter filter, double* image, size_t pixels);
DUALCT_API void dualct_projector_free(dualct_projector* p);

/* 10 log10(max(truth)^2 / MSE); +inf for identical inputs. */
DUALCT_API int dualct_psnr(const double* truth, const double* estimate, size_t n, double* out);

#ifdef __cplusplus
}
#endif

#endif
