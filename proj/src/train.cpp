#include "dualct/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dualct/error.hpp"
#include "dualct/log.hpp"
#include "dualct/rng.hpp"

namespace dualct {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
}

namespace {

DCSystem build_system(const TrainingSample& sample, const PolynomialDecomposer& decomposer, double* lambda,
                      const ReconConfig& config) {
  if (!sample.projector) throw ValidationError("training sample has no projector");
  const Projector& projector = *sample.projector;
  const MaterialSinogram p_hat = apply(decomposer, sample.y);
  DecompCovariance cov = covariance_weights(decomposer, sample.y);
  *lambda = config.lambda > 0.0 ? config.lambda
                                : default_lambda(cov.b_diag, operator_norm_sq(projector), config.lambda_factor);
  return DCSystem(projector, std::move(cov.b_diag), p_hat);
}

}  // namespace

PreparedSample::PreparedSample(const TrainingSample& sample, const PolynomialDecomposer& decomposer,
                               const ReconConfig& config)
    : projector_(sample.projector),
      system_(build_system(sample, decomposer, &lambda_, config)),
      truth_(sample.truth) {
  if (!(truth_.shape == projector_->geometry().image))
    throw DimensionError("training sample truth does not match its geometry");
}

double unrolled_loss(const PreparedSample& sample, const DenoiserParams& rho, const ReconConfig& config,
                     std::vector<double>* grad) {
  config.validate();
  const ImageShape shape = sample.system().shape();
  Tape tape;
  const DenoiserVars vars = register_parameters(tape, rho);
  Tape::Var z = tape.constant(std::vector<double>(2 * shape.pixels(), 0.0));
  Tape::Var x{};
  MaterialImage warm = MaterialImage::zeros(shape);
  for (int k = 0; k < config.k_outer; ++k) {
    Tape::Var xu = ops::dc_solve(tape, sample.system(), sample.lambda(), config, z, &warm);
    x = ops::clamp_nonneg(tape, xu);
    warm.densities = tape.value(x);
    if (k + 1 < config.k_outer) z = denoise(tape, rho, vars, x, shape);
  }
  Tape::Var loss = ops::mse(tape, x, sample.truth().densities);
  const double value = tape.value(loss)[0];
  if (grad) {
    tape.backward(loss);
    *grad = gather_gradient(tape, vars);
  }
  return value;
}

double unrolled_loss(const EnergySinogram& y, const MaterialImage& truth, const PolynomialDecomposer& decomposer,
                     const DenoiserParams& rho, const Projector& projector, const ReconConfig& config,
                     std::vector<double>* grad) {
  // non-owning handle; the sample does not outlive this call
  std::shared_ptr<const Projector> handle(&projector, [](const Projector*) {});
  const PreparedSample sample(TrainingSample{y, truth, handle}, decomposer, config);
  return unrolled_loss(sample, rho, config, grad);
}

DenoiserParams train(std::span<const TrainingSample> dataset, const PolynomialDecomposer& decomposer,
                     DenoiserParams initial, const TrainConfig& config, const ReconConfig& recon,
                     TrainReport* report) {
  config.validate();
  recon.validate();
  initial.validate();
  if (dataset.empty()) throw ValidationError("train: dataset is empty");

  std::vector<PreparedSample> samples;
  samples.reserve(dataset.size());
  double energy = 0.0;
  std::size_t count = 0;
  for (const auto& s : dataset) {
    samples.emplace_back(s, decomposer, recon);
    for (double v : s.truth.densities) energy += v * v;
    count += s.truth.densities.size();
  }
  const double grad_scale = config.normalize_gradient && energy > 0.0 ? double(count) / energy : 1.0;

  auto full_loss = [&](const DenoiserParams& rho) {
    double total = 0.0;
    for (const auto& s : samples) total += unrolled_loss(s, rho, recon);
    return total / double(samples.size());
  };

  TrainReport local;
  DenoiserParams rho = std::move(initial);
  std::vector<double> params = rho.flatten();
  std::vector<double> best = params;
  std::vector<double> velocity(params.size(), 0.0);
  double lr = config.learning_rate;
  double best_loss = full_loss(rho);
  local.epoch_loss.push_back(best_loss);
  local.learning_rate.push_back(lr);
  if (!std::isfinite(best_loss)) throw DivergenceError("train: initial loss is not finite");

  std::mt19937_64 rng(mix64(config.seed));
  std::vector<std::size_t> order(samples.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<double> g_batch(params.size(), 0.0);
      std::vector<double> g;
      // fixed summation order keeps the update reproducible
      for (std::size_t b = start; b < stop; ++b) {
        unrolled_loss(samples[order[b]], rho, recon, &g);
        for (std::size_t i = 0; i < g.size(); ++i) g_batch[i] += g[i];
      }
      const double inv = grad_scale / double(stop - start);
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] - lr * inv * g_batch[i];
        params[i] += velocity[i];
      }
      rho.assign(params);
    }

    const double loss = full_loss(rho);
    if (!std::isfinite(loss)) {
      log_warning("train: non-finite loss at epoch " + std::to_string(epoch) + "; returning last finite checkpoint");
      rho.assign(best);
      local.aborted = true;
      break;
    }
    if (loss <= best_loss) {
      best_loss = loss;
      best = params;
    } else {
      params = best;
      rho.assign(params);
      std::fill(velocity.begin(), velocity.end(), 0.0);
      lr *= 0.5;
      ++local.rejected_epochs;
    }
    local.epoch_loss.push_back(best_loss);
    local.learning_rate.push_back(lr);
    std::ostringstream msg;
    msg << "epoch " << epoch << " loss " << best_loss << " lr " << lr;
    log_info(msg.str());
  }
  if (report) *report = std::move(local);
  return rho;
}

}  // namespace dualct
