#include "mmfm/adaptation.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "mmfm/baselines.hpp"
#include "mmfm/error.hpp"

namespace mmfm {

FeatureVector feature_vector(const FeatureExtractor& theta, const ModelHyper& hyper,
                             std::span<const ChannelMatrix> samples) {
  if (samples.empty()) throw InvalidArgument("feature vector needs at least one sample");
  const std::vector<RateRequest> requests(samples.size(),
                                          RateRequest{RVector::Zero(hyper.n_users)});
  std::mt19937_64 unused(0);
  const ExtractorTape tape =
      forward_extractor(theta, hyper, samples, requests, Mode::kEval, unused);
  const RMatrix pooled = pooled_features(tape, hyper);
  return {pooled.colwise().mean().transpose(), static_cast<int>(samples.size())};
}

FeatureVector environment_features(const FeatureExtractor& theta,
                                   const ModelHyper& hyper,
                                   const SystemConfig& cfg,
                                   const EnvironmentDataset& data, int count,
                                   std::uint64_t seed) {
  if (count < 1) throw InvalidArgument("feature sample count must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<ChannelMatrix> samples;
  samples.reserve(count);
  for (int i = 0; i < count; ++i) samples.push_back(build_multiuser_csi(data, cfg, rng));
  return feature_vector(theta, hyper, samples);
}

double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  if (a.psi.size() != b.psi.size()) throw InvalidArgument("feature vector sizes differ");
  const double na = a.psi.norm();
  const double nb = b.psi.norm();
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw InvalidArgument("cosine similarity of a zero feature vector is undefined");
  }
  return std::clamp(a.psi.dot(b.psi) / (na * nb), -1.0, 1.0);
}

std::vector<SimilarityEntry> rank_by_similarity(
    const std::vector<std::pair<std::string, FeatureVector>>& candidates,
    const FeatureVector& target) {
  std::vector<SimilarityEntry> out;
  out.reserve(candidates.size());
  for (const auto& [id, fv] : candidates) out.push_back({id, cosine_similarity(fv, target)});
  std::sort(out.begin(), out.end(), [](const SimilarityEntry& x, const SimilarityEntry& y) {
    if (x.similarity != y.similarity) return x.similarity > y.similarity;
    return x.env_id < y.env_id;
  });
  return out;
}

std::string SimilarityReport::to_json() const {
  nlohmann::ordered_json j;
  j["deploy"] = deploy_id;
  nlohmann::ordered_json sim = nlohmann::ordered_json::object();
  for (const auto& e : ranking) sim[e.env_id] = e.similarity;
  j["similarity"] = sim;
  j["selected"] = selected;
  return j.dump(2);
}

DeployMode parse_deploy_mode(const std::string& name) {
  if (name == "zero_shot") return DeployMode::kZeroShot;
  if (name == "few_shot") return DeployMode::kFewShot;
  if (name == "full") return DeployMode::kFull;
  throw InvalidArgument("unknown deployment mode '" + name +
                        "' (expected zero_shot, few_shot or full)");
}

std::string to_string(DeployMode mode) {
  switch (mode) {
    case DeployMode::kZeroShot: return "zero_shot";
    case DeployMode::kFewShot: return "few_shot";
    case DeployMode::kFull: return "full";
  }
  return "unknown";
}

void AdaptationOptions::validate() const {
  if (n_select < 1) throw InvalidArgument("n_select must be >= 1");
  if (feature_samples < 1) throw InvalidArgument("feature_samples must be >= 1");
  if (!(local_weight > 0.0)) throw InvalidArgument("local_weight must be positive");
  if (!(few_shot_fraction > 0.0 && few_shot_fraction <= 1.0)) {
    throw InvalidArgument("few_shot_fraction must lie in (0, 1]");
  }
}

Deployer::Deployer(const FeatureExtractor& theta, const ModelHyper& hyper,
                   const SystemConfig& cfg, const TrainConfig& train,
                   std::vector<TrainingEnvironment> train_envs,
                   AdaptationOptions options)
    : theta_(theta),
      hyper_(hyper),
      cfg_(cfg),
      train_(train),
      envs_(std::move(train_envs)),
      options_(options) {
  hyper_.validate_against(cfg_);
  train_.validate();
  options_.validate();
  if (envs_.empty()) throw InvalidArgument("deployment needs training environments");
  for (const auto& e : envs_) {
    if (e.data == nullptr) throw InvalidArgument("null training environment");
  }
}

const OutputHead& Deployer::zero_shot_head() {
  if (!zero_shot_) {
    std::vector<HeadSource> sources;
    for (const auto& e : envs_) {
      sources.push_back({e.data, e.rmax, static_cast<double>(e.data->size())});
    }
    zero_shot_ = train_head(theta_, hyper_, cfg_, train_, sources, train_.pretrain_epochs,
                            train_.train_epochs, derive_seed(options_.seed, 0x2E50u));
  }
  return *zero_shot_;
}

void Deployer::set_zero_shot_head(OutputHead head) { zero_shot_ = std::move(head); }

SimilarityReport Deployer::similarity(const EnvironmentDataset& local) const {
  SimilarityReport report;
  report.deploy_id = local.spec.env_id;
  const FeatureVector target =
      environment_features(theta_, hyper_, cfg_, local, options_.feature_samples,
                           derive_seed(options_.seed, 0xDE9Eu));
  // Every training pool is sampled with the same stream, so identical pools
  // get identical features.
  const std::uint64_t stream = derive_seed(options_.seed, 0xFEA7u);
  std::vector<std::pair<std::string, FeatureVector>> candidates;
  for (const auto& env : envs_) {
    candidates.emplace_back(env.data->spec.env_id,
                            environment_features(theta_, hyper_, cfg_, *env.data,
                                                 options_.feature_samples, stream));
  }
  report.ranking = rank_by_similarity(candidates, target);
  const std::size_t n = std::min<std::size_t>(options_.n_select, report.ranking.size());
  for (std::size_t i = 0; i < n; ++i) report.selected.push_back(report.ranking[i].env_id);
  return report;
}

OutputHead Deployer::deploy(DeployMode mode, const EnvironmentDataset& local,
                            std::optional<double> local_rmax,
                            SimilarityReport* report) {
  if (mode == DeployMode::kZeroShot) return zero_shot_head();

  if (local.size() < static_cast<std::size_t>(cfg_.n_users)) {
    throw InvalidArgument(
        to_string(mode) + " deployment needs at least " + std::to_string(cfg_.n_users) +
        " local channels (one multi-user CSI), got " + std::to_string(local.size()) +
        (local.size() == 0 ? "; use zero_shot without local data" : ""));
  }
  const double rmax = local_rmax.value_or(
      wmmse_rate_bound(local, cfg_, std::min<int>(train_.rmax_samples, static_cast<int>(local.size())),
                       derive_seed(options_.seed, 0x4A11u)));
  const std::uint64_t seed = derive_seed(options_.seed, mode == DeployMode::kFull ? 0xF011u : 0xF3u);

  if (mode == DeployMode::kFull) {
    return train_head(theta_, hyper_, cfg_, train_, {{&local, rmax, 1.0}},
                      train_.pretrain_epochs, train_.train_epochs, seed);
  }

  SimilarityReport sim = similarity(local);
  std::vector<HeadSource> sources;
  for (const auto& id : sim.selected) {
    const auto it = std::find_if(envs_.begin(), envs_.end(), [&](const TrainingEnvironment& e) {
      return e.data->spec.env_id == id;
    });
    sources.push_back({it->data, it->rmax, static_cast<double>(it->data->size())});
  }
  sources.push_back({&local, rmax, options_.local_weight * static_cast<double>(local.size())});
  const auto scaled = [&](int epochs) {
    return epochs == 0 ? 0
                       : std::max(1, static_cast<int>(std::lround(options_.few_shot_fraction * epochs)));
  };
  if (report) *report = sim;
  return train_head(theta_, hyper_, cfg_, train_, sources, scaled(train_.pretrain_epochs),
                    scaled(train_.train_epochs), seed);
}

}  // namespace mmfm
