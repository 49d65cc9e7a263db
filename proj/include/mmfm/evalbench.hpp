#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mmfm/channelgen.hpp"
#include "mmfm/core.hpp"
#include "mmfm/nn.hpp"

namespace mmfm {

// Maps a CSI instance and a rate request to a precoding decision.
using Policy = std::function<PrecodingSolution(const ChannelMatrix&, const RateRequest&)>;

// Eval-mode forward pass of extractor + head.
Policy model_policy(const FeatureExtractor& theta, const OutputHead& head,
                    const ModelHyper& hyper, const SystemConfig& cfg);

// Policy that returns the WMMSE precoder at full power, ignoring the request.
Policy wmmse_policy(const SystemConfig& cfg);

struct MaxRateResult {
  int n_eval = 0;
  double model = 0.0;         // mean sum-rate of the evaluated policy
  double model_energy = 0.0;  // mean energy of the evaluated policy (W)
  double zf = 0.0;
  double wmmse = 0.0;

  std::string to_json() const;
};

// Mean sum-rate at the max-rate request over n_eval CSIs drawn with
// std::mt19937_64(seed), the same draws wmmse_rate_bound(dataset, cfg, n_eval,
// seed) uses. ZF and WMMSE run on the identical instances; WMMSE is skipped
// (left at 0) when with_wmmse is false.
MaxRateResult max_sum_rate_eval(const Policy& policy, const EnvironmentDataset& dataset,
                                const SystemConfig& cfg, int n_eval, std::uint64_t seed,
                                bool with_wmmse = true);

struct TradeoffPoint {
  double requested_sum_rate = 0.0;
  double achieved_sum_rate = 0.0;
  double energy = 0.0;
  // mean_u |R_u - R*_u| / R*_u over users with R*_u > 0; zero and excluded
  // from summaries when positive_targets is 0.
  double mean_relative_rate_error = 0.0;
  int positive_targets = 0;

  bool operator==(const TradeoffPoint&) const = default;
};

TradeoffPoint make_tradeoff_point(const ChannelMatrix& channel,
                                  const PrecodingSolution& solution,
                                  const RateRequest& request, const SystemConfig& cfg);

// One point per CSI draw with a fresh requirement vector scaled to rmax;
// sorted by achieved sum-rate (ties by requested sum-rate).
std::vector<TradeoffPoint> tradeoff_sweep(const Policy& policy,
                                          const EnvironmentDataset& dataset,
                                          const SystemConfig& cfg, double rmax,
                                          int n_points, std::uint64_t seed);

// Spearman rank correlation with average ranks for ties. Returns 0 when
// either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SweepSummary {
  int n_points = 0;
  double mean_relative_rate_error = 0.0;  // over points with positive targets
  double median_relative_rate_error = 0.0;
  double spearman_energy = 0.0;         // energy vs requested sum-rate, all points
  double spearman_energy_deciles = 0.0;  // same on decile means of the request
  std::vector<double> decile_request;    // mean requested sum-rate per decile
  std::vector<double> decile_energy;     // mean energy per decile

  std::string to_json() const;
};

SweepSummary summarize_sweep(const std::vector<TradeoffPoint>& points);

void write_tradeoff_csv(const std::vector<TradeoffPoint>& points,
                        const std::filesystem::path& path);
std::vector<TradeoffPoint> read_tradeoff_csv(const std::filesystem::path& path);
std::string tradeoff_to_json(const std::vector<TradeoffPoint>& points);
std::vector<TradeoffPoint> tradeoff_from_json(const std::string& text);

// Entry (i, j): mean max-rate sum-rate of heads[i] on datasets[j]. Every
// cell draws its CSIs with the same seed, so relabeling the environments
// permutes the table exactly.
RMatrix cross_site_matrix(const FeatureExtractor& theta,
                          const std::vector<OutputHead>& heads,
                          const std::vector<const EnvironmentDataset*>& datasets,
                          const ModelHyper& hyper, const SystemConfig& cfg,
                          int n_eval, std::uint64_t seed);

double diagonal_mean(const RMatrix& table);
double off_diagonal_mean(const RMatrix& table);  // 0 for a 1x1 table

enum class FlopAlgorithm { kZf, kWmmse, kProposed };
FlopAlgorithm parse_flop_algorithm(const std::string& name);
std::string to_string(FlopAlgorithm algorithm);

// Closed-form precoder FLOP counts, evaluated in real arithmetic.
double flop_count(FlopAlgorithm algorithm, int n_users, int n_tx, int iterations = 1);

// x rounded to `digits` significant figures.
double round_significant(double x, int digits);

struct FlopReport {
  FlopAlgorithm algorithm = FlopAlgorithm::kZf;
  double flops = 0.0;
  double millions = 0.0;          // flops / 1e6, unrounded
  double display_millions = 0.0;  // millions at 2 significant figures
};
FlopReport flop_report(FlopAlgorithm algorithm, int n_users, int n_tx, int iterations = 1);

// Multiply-add counted as 2 FLOPs; elementwise ops as 1 per element (GELU,
// softmax exponent and the like as a small fixed count per element).
struct LayerFlops {
  std::string name;
  double flops = 0.0;
};
std::vector<LayerFlops> model_flop_audit(const ModelHyper& hyper);
double total_flops(const std::vector<LayerFlops>& layers);

}  // namespace mmfm
