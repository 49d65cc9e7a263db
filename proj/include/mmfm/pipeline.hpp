#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmfm/config.hpp"

namespace mmfm {

// `git describe` of the source tree at build time, or "unknown".
std::string build_version();

// FNV-1a of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

struct StageResult {
  std::string stage;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  std::filesystem::path manifest;
};

// Artifact layout shared by the stages:
//   data_dir/<env_id>.csif
//   checkpoint_dir/pretrain.ckpt, anchors.json, model.ckpt
//   checkpoint_dir/heads/zero_shot.head, heads/<deploy>.<mode>.head
//   report_dir/<stage>.manifest.json plus the stage reports.
// Deployment datasets are split in half: heads adapt on the first half and
// are evaluated on the second.
class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  // Applies the MMFM_REPORT_DIR environment variable when it is set.
  explicit Pipeline(RunConfig config, Logger log = {});

  const RunConfig& config() const { return config_; }

  StageResult gen_data();
  StageResult pretrain();
  StageResult train();
  StageResult adapt();
  StageResult eval();
  StageResult sweep();
  // Needs no artifacts; reports closed-form counts and the model audit.
  StageResult flops(int wmmse_iterations = 16);

  std::filesystem::path dataset_path(const std::string& env_id) const;
  std::filesystem::path checkpoint_path(const std::string& name) const;
  std::filesystem::path head_path(const std::string& deploy_id, DeployMode mode) const;
  std::filesystem::path report_path(const std::string& name) const;
  std::string eval_report_name() const;  // eval_<hash>_s<seed>.json

  // Dataset file for an entry, checked against the configuration and with
  // the full generation spec restored.
  EnvironmentDataset load_dataset(const EnvironmentEntry& entry,
                                  std::vector<std::filesystem::path>* inputs = nullptr) const;
  // The generation spec of an entry under this run's seed.
  EnvironmentSpec resolved_spec(const EnvironmentEntry& entry) const;

  struct Anchors {
    double csi_scale = 1.0;
    std::map<std::string, double> rmax;  // training environments
  };
  Anchors load_anchors(std::vector<std::filesystem::path>* inputs = nullptr) const;

 private:
  void emit(const std::string& line) const;
  StageResult finish(StageResult result) const;
  Model load_model(const std::string& name, const char* producer,
                   std::vector<std::filesystem::path>* inputs) const;
  std::filesystem::path require(const std::filesystem::path& path, const char* producer) const;

  RunConfig config_;
  Logger log_;
};

}  // namespace mmfm
