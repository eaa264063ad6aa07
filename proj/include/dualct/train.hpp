#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "dualct/decomp.hpp"
#include "dualct/denoiser.hpp"
#include "dualct/recon.hpp"

namespace dualct {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  /// Gradients are divided by mean(truth^2) over the dataset before the
  /// update, so the step size does not depend on the density units.
  bool normalize_gradient = true;

  void validate() const;
};

struct TrainingSample {
  EnergySinogram y;
  MaterialImage truth;
  std::shared_ptr<const Projector> projector;
};

/// Everything about a sample that does not depend on the denoiser: the
/// decomposed sinogram, its weights, the DC system and lambda.
class PreparedSample {
 public:
  PreparedSample(const TrainingSample& sample, const PolynomialDecomposer& decomposer,
                 const ReconConfig& config);

  const DCSystem& system() const { return system_; }
  double lambda() const { return lambda_; }
  const MaterialImage& truth() const { return truth_; }

 private:
  std::shared_ptr<const Projector> projector_;
  double lambda_ = 0.0;
  DCSystem system_;
  MaterialImage truth_;
};

/// mean((e2e_decomp(y) - truth)^2) over pixels and both materials. When
/// `grad` is given it receives d loss / d rho in DenoiserParams::flatten
/// order, computed by reverse mode through the unrolled iterations.
double unrolled_loss(const PreparedSample& sample, const DenoiserParams& rho, const ReconConfig& config,
                     std::vector<double>* grad = nullptr);

double unrolled_loss(const EnergySinogram& y, const MaterialImage& truth, const PolynomialDecomposer& decomposer,
                     const DenoiserParams& rho, const Projector& projector, const ReconConfig& config,
                     std::vector<double>* grad = nullptr);

struct TrainReport {
  std::vector<double> epoch_loss;  // index 0 is the loss before training
  std::vector<double> learning_rate;
  int rejected_epochs = 0;
  bool aborted = false;  // non-finite loss; the last finite checkpoint was returned
};

/// Mini-batch SGD with momentum on the mean unrolled loss. After each epoch
/// the full-batch loss is evaluated; an increase restores the previous
/// parameters, clears the momentum and halves the learning rate.
DenoiserParams train(std::span<const TrainingSample> dataset, const PolynomialDecomposer& decomposer,
                     DenoiserParams initial, const TrainConfig& config, const ReconConfig& recon,
                     TrainReport* report = nullptr);

}  // namespace dualct
