#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmfm/adaptation.hpp"
#include "mmfm/channelgen.hpp"
#include "mmfm/core.hpp"
#include "mmfm/nn.hpp"
#include "mmfm/training.hpp"

namespace mmfm {

// One environment split in the run configuration.
struct EnvironmentEntry {
  EnvironmentSpec spec;
  std::size_t n_samples = 1000;
  bool deploy = false;  // held-out deployment site instead of a training site
};

struct AdaptConfig {
  int n_select = 5;
  int feature_samples = 10;
  double local_weight = 10.0;
  double few_shot_fraction = 0.2;
  int few_shot_samples = 10;  // local channels available in few-shot mode
  // Head-training schedule; unset values inherit from the train section.
  std::optional<double> head_learning_rate;
  std::optional<int> head_pretrain_epochs;
  std::optional<int> head_train_epochs;
  std::vector<DeployMode> modes{DeployMode::kZeroShot, DeployMode::kFewShot,
                                DeployMode::kFull};
};

struct EvalConfig {
  int n_eval = 200;           // CSIs per max-sum-rate evaluation
  int sweep_points = 10000;   // requests per trade-off sweep
  bool cross_site = true;     // evaluate every training head on every training site
  bool wmmse = true;          // include WMMSE in max-sum-rate reports
};

struct PathsConfig {
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";
};

struct RunConfig {
  std::uint64_t seed = 1;
  SystemConfig system;
  std::vector<EnvironmentEntry> channel;
  ModelHyper model;
  bool auto_csi_scale = true;  // model.csi_scale "auto": set from the data
  TrainConfig train;
  AdaptConfig adapt;
  EvalConfig eval;
  PathsConfig paths;

  static RunConfig from_json(const nlohmann::json& doc);
  nlohmann::ordered_json to_json() const;
  void validate() const;

  // FNV-1a over the canonical (key-sorted, compact) JSON form without the
  // paths section, as 16 hex digits.
  std::string hash() const;

  std::vector<const EnvironmentEntry*> training_entries() const;
  std::vector<const EnvironmentEntry*> deploy_entries() const;
  // Seed used to generate an environment's channels.
  std::uint64_t data_seed(const EnvironmentEntry& entry) const;
  // Model hyperparameters with n_tx / n_users taken from the system section.
  ModelHyper model_hyper() const;
  // Train section with the adapt.head_* overrides applied.
  TrainConfig head_train_config() const;
  AdaptationOptions adaptation_options() const;
};

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
// possible (numbers, booleans, arrays, quoted strings) and otherwise taken as
// a bare string. Numeric path segments index arrays.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Reads, overrides and validates a configuration file; ConfigError on any
// problem. `seed`, when given, replaces the top-level seed.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {},
                      std::optional<std::uint64_t> seed = std::nullopt);
RunConfig parse_config(const std::string& text,
                       const std::vector<std::string>& overrides = {},
                       std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace mmfm
