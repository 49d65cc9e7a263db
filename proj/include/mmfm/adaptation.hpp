#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmfm/channelgen.hpp"
#include "mmfm/nn.hpp"
#include "mmfm/training.hpp"

namespace mmfm {

// Mean pooled extractor feature of an environment (psi_e).
struct FeatureVector {
  RVector psi;
  int n_samples = 0;
};

// Features are computed in eval mode with an all-zeros rate request, so psi
// depends on the CSI only.
FeatureVector feature_vector(const FeatureExtractor& theta, const ModelHyper& hyper,
                             std::span<const ChannelMatrix> samples);

// Draws `count` multi-user CSIs from the pool with a fixed seed and returns
// their feature vector.
FeatureVector environment_features(const FeatureExtractor& theta,
                                   const ModelHyper& hyper,
                                   const SystemConfig& cfg,
                                   const EnvironmentDataset& data, int count,
                                   std::uint64_t seed);

double cosine_similarity(const FeatureVector& a, const FeatureVector& b);

struct SimilarityEntry {
  std::string env_id;
  double similarity = 0.0;
};

// Sorted by descending similarity, ties by ascending env_id.
std::vector<SimilarityEntry> rank_by_similarity(
    const std::vector<std::pair<std::string, FeatureVector>>& candidates,
    const FeatureVector& target);

struct SimilarityReport {
  std::string deploy_id;
  std::vector<SimilarityEntry> ranking;  // all candidates, best first
  std::vector<std::string> selected;     // the top n_select ids

  std::string to_json() const;
};

enum class DeployMode { kZeroShot, kFewShot, kFull };
DeployMode parse_deploy_mode(const std::string& name);
std::string to_string(DeployMode mode);

struct AdaptationOptions {
  int n_select = 5;            // top-N augmentation environments
  int feature_samples = 10;    // multi-user CSIs behind each psi
  double local_weight = 10.0;  // per-sample upweighting of local data
  double few_shot_fraction = 0.2;  // of the phase-2 epoch budget
  std::uint64_t seed = 1;

  void validate() const;
};

// Builds deployment heads on top of a frozen feature extractor. The default
// (zero-shot) head is trained once on all training environments and cached.
class Deployer {
 public:
  Deployer(const FeatureExtractor& theta, const ModelHyper& hyper,
           const SystemConfig& cfg, const TrainConfig& train,
           std::vector<TrainingEnvironment> train_envs, AdaptationOptions options);

  const OutputHead& zero_shot_head();
  // Installs a previously trained default head instead of training one.
  void set_zero_shot_head(OutputHead head);

  // Ranks the training environments against the deployment samples.
  SimilarityReport similarity(const EnvironmentDataset& local) const;

  // Heads are trained with the two-phase schedule of TrainConfig (the
  // few-shot head with both epoch counts scaled by few_shot_fraction).
  // few_shot: fresh head on the top-N similar environments plus the local
  // samples; full: fresh head on the local data only; zero_shot ignores
  // `local`. `local_rmax` anchors the requirement sampling of local data and
  // is estimated with WMMSE when absent.
  OutputHead deploy(DeployMode mode, const EnvironmentDataset& local,
                    std::optional<double> local_rmax = std::nullopt,
                    SimilarityReport* report = nullptr);

 private:
  const FeatureExtractor& theta_;
  ModelHyper hyper_;
  SystemConfig cfg_;
  TrainConfig train_;
  std::vector<TrainingEnvironment> envs_;
  AdaptationOptions options_;
  std::optional<OutputHead> zero_shot_;
};

}  // namespace mmfm
