#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmfm/channelgen.hpp"
#include "mmfm/core.hpp"
#include "mmfm/nn.hpp"

namespace mmfm {

// Per-user request used for maximum sum-rate operation.
inline constexpr double kMaxRateRequest = 1e3;

struct LossValue {
  double value = 0.0;
  SolutionGradient grad;  // dL/d(solution)
};

// Mean squared error between achieved and requested user rates.
LossValue loss_adaptive_rate(const ChannelMatrix& channel,
                             const PrecodingSolution& solution,
                             const RateRequest& request, const SystemConfig& cfg);

// mu * L_AR + (1 - mu) * E / (p_tx + n_tx p_rf).
LossValue loss_total(const ChannelMatrix& channel,
                     const PrecodingSolution& solution,
                     const RateRequest& request, const SystemConfig& cfg,
                     double mu);

// Negative sum-rate, the pre-training objective.
LossValue loss_negative_sum_rate(const ChannelMatrix& channel,
                                 const PrecodingSolution& solution,
                                 const SystemConfig& cfg);

// R*_u ~ U(0,1), beta ~ U(0,1), rescaled so that sum_u R*_u = beta * rmax.
RateRequest sample_rate_requirements(double rmax, int n_users,
                                     std::mt19937_64& rng);

struct TrainConfig {
  double mu = 0.99;
  double clamp_threshold = 100.0;
  double learning_rate = 1e-4;
  int batch_size = 1000;
  int batches_per_epoch = 5;
  int pretrain_epochs = 10;
  int train_epochs = 10;
  double rate_decay = 0.9;  // smoothing of the per-environment sum-rates
  int rmax_samples = 100;   // WMMSE instances behind each R_e^max
  std::uint64_t seed = 1;

  void validate() const;
};

// Site-aware gradient weights.
struct SiteWeights {
  RVector alpha;       // normalized weights of the latest batch
  RVector alpha_raw;   // clamped, before normalization
  RVector rmax;        // WMMSE upper-bound sum-rate per environment
  RVector last_rates;  // smoothed sum-rate per environment

  static SiteWeights initial(const RVector& rmax);
  // alpha_e = clamp((R_e - R_e^max)^2, 1, T), then normalized to sum 1.
  void recompute(double clamp_threshold);
  void observe(const RVector& batch_rates, double decay);
};

// Adam with the usual default decay constants.
template <typename P>
struct Adam {
  P m, v;
  long step_count = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  Adam() = default;
  explicit Adam(const P& like) : m(zeros_like(like)), v(zeros_like(like)) {}

  void step(P& params, P& grads, double lr) {
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    auto ps = params.tensors();
    auto gs = grads.tensors();
    auto ms = m.tensors();
    auto vs = v.tensors();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto g = gs[i].map().array();
      ms[i].map().array() = beta1 * ms[i].map().array() + (1.0 - beta1) * g;
      vs[i].map().array() = beta2 * vs[i].map().array() + (1.0 - beta2) * g.square();
      ps[i].map().array() -= lr * (ms[i].map().array() / c1) /
                             ((vs[i].map().array() / c2).sqrt() + eps);
    }
  }
};

struct EpochMetrics {
  std::string phase;
  int epoch = 0;
  std::vector<std::string> env_ids;
  std::vector<double> sum_rates;  // mean batch sum-rate per environment
  double loss = 0.0;
  std::vector<double> alpha;  // last normalized site weights (pre-training)

  std::string to_json_line() const;
};

// A training environment: its single-user pool and WMMSE anchor.
struct TrainingEnvironment {
  const EnvironmentDataset* data = nullptr;
  double rmax = 0.0;
};

// Per-environment results of one training batch.
struct BatchResult {
  RVector sum_rates;
  RVector losses;
  FeatureExtractor extractor_grad;
  std::vector<OutputHead> head_grads;  // one per environment
};

// Runs both phases of foundation-model training. The model's head map must
// contain one head per environment id.
class Trainer {
 public:
  Trainer(Model& model, const SystemConfig& cfg, const TrainConfig& train,
          std::vector<TrainingEnvironment> envs);

  // One phase-1 batch across all environments; updates parameters.
  BatchResult pretrain_batch();
  // One phase-2 batch; updates parameters.
  BatchResult multiobjective_batch();

  EpochMetrics pretrain_epoch();
  EpochMetrics multiobjective_epoch();

  // Phase-2 gradients for given inputs without updating anything.
  // channels[e] / requests[e] hold environment e's batch.
  BatchResult multiobjective_gradients(
      const std::vector<std::vector<ChannelMatrix>>& channels,
      const std::vector<std::vector<RateRequest>>& requests,
      std::mt19937_64& dropout_rng) const;

  const SiteWeights& weights() const { return weights_; }
  SiteWeights& weights() { return weights_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<std::vector<ChannelMatrix>> draw_batches();
  void apply(BatchResult& result);

  Model& model_;
  SystemConfig cfg_;
  TrainConfig train_;
  std::vector<TrainingEnvironment> envs_;
  std::vector<std::string> ids_;
  SiteWeights weights_;
  Adam<FeatureExtractor> extractor_opt_;
  std::vector<Adam<OutputHead>> head_opts_;
  std::mt19937_64 rng_;
  int pretrain_epoch_ = 0;
  int train_epoch_ = 0;
};

// Trains only an output head on top of a frozen extractor: pretrain_epochs
// of negative sum-rate at the max-rate request, then epochs of the phase-2
// loss. Samples are drawn from the sources in proportion to their weights.
struct HeadSource {
  const EnvironmentDataset* data = nullptr;
  double rmax = 0.0;
  double weight = 1.0;
};

OutputHead train_head(const FeatureExtractor& theta, const ModelHyper& hyper,
                      const SystemConfig& cfg, const TrainConfig& train,
                      const std::vector<HeadSource>& sources, int pretrain_epochs,
                      int epochs, std::uint64_t seed);

}  // namespace mmfm
