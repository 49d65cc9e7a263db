#include "mmfm/evalbench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mmfm/baselines.hpp"
#include "mmfm/error.hpp"
#include "mmfm/training.hpp"

namespace mmfm {

namespace {

std::string shortest(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text, const std::string& where) {
  double value = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw FormatError(FormatError::Kind::kTruncated,
                      where + ": cannot parse number '" + std::string(text) + "'");
  }
  return value;
}

constexpr const char* kCsvHeader =
    "requested_sum_rate,achieved_sum_rate,energy,mean_relative_rate_error,positive_targets";

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = mean_rank;
    i = j + 1;
  }
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Policy model_policy(const FeatureExtractor& theta, const OutputHead& head,
                    const ModelHyper& hyper, const SystemConfig& cfg) {
  hyper.validate_against(cfg);
  return [&theta, &head, hyper, cfg](const ChannelMatrix& h, const RateRequest& request) {
    std::mt19937_64 unused(0);
    return forward(theta, head, hyper, cfg, h, request, Mode::kEval, unused).solution;
  };
}

Policy wmmse_policy(const SystemConfig& cfg) {
  return [cfg](const ChannelMatrix& h, const RateRequest&) {
    return wmmse_precoder(h, cfg).solution();
  };
}

std::string MaxRateResult::to_json() const {
  nlohmann::ordered_json j;
  j["n_eval"] = n_eval;
  j["model_sum_rate"] = model;
  j["model_energy"] = model_energy;
  j["zf_sum_rate"] = zf;
  j["wmmse_sum_rate"] = wmmse;
  return j.dump(2);
}

MaxRateResult max_sum_rate_eval(const Policy& policy, const EnvironmentDataset& dataset,
                                const SystemConfig& cfg, int n_eval, std::uint64_t seed,
                                bool with_wmmse) {
  if (n_eval < 1) throw InvalidArgument("n_eval must be >= 1");
  std::mt19937_64 rng(seed);
  const RateRequest request = RateRequest::uniform(cfg.n_users, kMaxRateRequest);
  MaxRateResult r;
  r.n_eval = n_eval;
  for (int i = 0; i < n_eval; ++i) {
    const ChannelMatrix h = build_multiuser_csi(dataset, cfg, rng);
    const PrecodingSolution s = policy(h, request);
    r.model += sum_rate(h, s, cfg);
    r.model_energy += energy(s, cfg);
    r.zf += sum_rate(h, zf_precoder(h, cfg), cfg);
    if (with_wmmse) r.wmmse += wmmse_precoder(h, cfg).final_rate();
  }
  r.model /= n_eval;
  r.model_energy /= n_eval;
  r.zf /= n_eval;
  r.wmmse /= n_eval;
  return r;
}

TradeoffPoint make_tradeoff_point(const ChannelMatrix& channel,
                                  const PrecodingSolution& solution,
                                  const RateRequest& request, const SystemConfig& cfg) {
  request.validate(cfg.n_users);
  const RVector rates = user_rates(channel, solution, cfg);
  TradeoffPoint p;
  p.requested_sum_rate = request.targets.sum();
  p.achieved_sum_rate = rates.sum();
  p.energy = energy(solution, cfg);
  double err = 0.0;
  for (int u = 0; u < cfg.n_users; ++u) {
    const double target = request.targets(u);
    if (target > 0.0) {
      err += std::abs(rates(u) - target) / target;
      ++p.positive_targets;
    }
  }
  if (p.positive_targets > 0) p.mean_relative_rate_error = err / p.positive_targets;
  return p;
}

std::vector<TradeoffPoint> tradeoff_sweep(const Policy& policy,
                                          const EnvironmentDataset& dataset,
                                          const SystemConfig& cfg, double rmax,
                                          int n_points, std::uint64_t seed) {
  if (n_points < 1) throw InvalidArgument("n_points must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<TradeoffPoint> points;
  points.reserve(n_points);
  for (int i = 0; i < n_points; ++i) {
    const ChannelMatrix h = build_multiuser_csi(dataset, cfg, rng);
    const RateRequest request = sample_rate_requirements(rmax, cfg.n_users, rng);
    points.push_back(make_tradeoff_point(h, policy(h, request), request, cfg));
  }
  std::stable_sort(points.begin(), points.end(), [](const TradeoffPoint& a, const TradeoffPoint& b) {
    if (a.achieved_sum_rate != b.achieved_sum_rate) return a.achieved_sum_rate < b.achieved_sum_rate;
    return a.requested_sum_rate < b.requested_sum_rate;
  });
  return points;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidArgument("spearman needs equal-length inputs");
  if (x.size() < 2) return 0.0;
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string SweepSummary::to_json() const {
  nlohmann::ordered_json j;
  j["n_points"] = n_points;
  j["mean_relative_rate_error"] = mean_relative_rate_error;
  j["median_relative_rate_error"] = median_relative_rate_error;
  j["spearman_energy"] = spearman_energy;
  j["spearman_energy_deciles"] = spearman_energy_deciles;
  j["decile_request"] = decile_request;
  j["decile_energy"] = decile_energy;
  return j.dump(2);
}

SweepSummary summarize_sweep(const std::vector<TradeoffPoint>& points) {
  SweepSummary s;
  s.n_points = static_cast<int>(points.size());
  std::vector<double> errors, requested, energies;
  for (const auto& p : points) {
    if (p.positive_targets > 0) errors.push_back(p.mean_relative_rate_error);
    requested.push_back(p.requested_sum_rate);
    energies.push_back(p.energy);
  }
  if (!errors.empty()) {
    s.mean_relative_rate_error =
        std::accumulate(errors.begin(), errors.end(), 0.0) / static_cast<double>(errors.size());
    s.median_relative_rate_error = median(errors);
  }
  s.spearman_energy = spearman(requested, energies);

  // Deciles of the requested sum-rate.
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return requested[a] < requested[b]; });
  const std::size_t bins = std::min<std::size_t>(10, points.size());
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * points.size() / bins;
    const std::size_t hi = (b + 1) * points.size() / bins;
    double r = 0.0, e = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      r += requested[order[i]];
      e += energies[order[i]];
    }
    s.decile_request.push_back(r / static_cast<double>(hi - lo));
    s.decile_energy.push_back(e / static_cast<double>(hi - lo));
  }
  s.spearman_energy_deciles = spearman(s.decile_request, s.decile_energy);
  return s;
}

void write_tradeoff_csv(const std::vector<TradeoffPoint>& points,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out << kCsvHeader << '\n';
  for (const auto& p : points) {
    out << shortest(p.requested_sum_rate) << ',' << shortest(p.achieved_sum_rate) << ','
        << shortest(p.energy) << ',' << shortest(p.mean_relative_rate_error) << ','
        << p.positive_targets << '\n';
  }
  if (!out) throw FormatError(FormatError::Kind::kIo, "write failed: " + path.string());
}

std::vector<TradeoffPoint> read_tradeoff_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw FormatError(FormatError::Kind::kBadMagic,
                      path.string() + " is not a trade-off CSV (header mismatch)");
  }
  std::vector<TradeoffPoint> points;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    const std::string where = path.string() + " row " + std::to_string(row);
    if (cells.size() != 5) {
      throw FormatError(FormatError::Kind::kTruncated, where + ": expected 5 fields");
    }
    TradeoffPoint p;
    p.requested_sum_rate = parse_double(cells[0], where);
    p.achieved_sum_rate = parse_double(cells[1], where);
    p.energy = parse_double(cells[2], where);
    p.mean_relative_rate_error = parse_double(cells[3], where);
    const double count = parse_double(cells[4], where);
    p.positive_targets = static_cast<int>(count);
    if (static_cast<double>(p.positive_targets) != count) {
      throw FormatError(FormatError::Kind::kTruncated, where + ": fractional target count");
    }
    points.push_back(p);
  }
  return points;
}

std::string tradeoff_to_json(const std::vector<TradeoffPoint>& points) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : points) {
    nlohmann::ordered_json j;
    j["requested_sum_rate"] = p.requested_sum_rate;
    j["achieved_sum_rate"] = p.achieved_sum_rate;
    j["energy"] = p.energy;
    j["mean_relative_rate_error"] = p.mean_relative_rate_error;
    j["positive_targets"] = p.positive_targets;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

std::vector<TradeoffPoint> tradeoff_from_json(const std::string& text) {
  std::vector<TradeoffPoint> points;
  try {
    const auto arr = nlohmann::json::parse(text);
    for (const auto& j : arr) {
      TradeoffPoint p;
      p.requested_sum_rate = j.at("requested_sum_rate").get<double>();
      p.achieved_sum_rate = j.at("achieved_sum_rate").get<double>();
      p.energy = j.at("energy").get<double>();
      p.mean_relative_rate_error = j.at("mean_relative_rate_error").get<double>();
      p.positive_targets = j.at("positive_targets").get<int>();
      points.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kTruncated, std::string("trade-off JSON: ") + e.what());
  }
  return points;
}

RMatrix cross_site_matrix(const FeatureExtractor& theta,
                          const std::vector<OutputHead>& heads,
                          const std::vector<const EnvironmentDataset*>& datasets,
                          const ModelHyper& hyper, const SystemConfig& cfg,
                          int n_eval, std::uint64_t seed) {
  if (heads.size() != datasets.size() || heads.empty()) {
    throw InvalidArgument("cross-site matrix needs one head per dataset");
  }
  const auto k = static_cast<Eigen::Index>(heads.size());
  RMatrix table(k, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index i = 0; i < k; ++i) {
      const Policy policy = model_policy(theta, heads[i], hyper, cfg);
      table(i, j) = max_sum_rate_eval(policy, *datasets[j], cfg, n_eval, seed, false).model;
    }
  }
  return table;
}

double diagonal_mean(const RMatrix& table) { return table.diagonal().mean(); }

double off_diagonal_mean(const RMatrix& table) {
  const auto k = table.rows();
  if (k < 2) return 0.0;
  return (table.sum() - table.diagonal().sum()) / static_cast<double>(k * (k - 1));
}

FlopAlgorithm parse_flop_algorithm(const std::string& name) {
  if (name == "zf") return FlopAlgorithm::kZf;
  if (name == "wmmse") return FlopAlgorithm::kWmmse;
  if (name == "proposed") return FlopAlgorithm::kProposed;
  throw InvalidArgument("unknown algorithm '" + name + "' (expected zf, wmmse or proposed)");
}

std::string to_string(FlopAlgorithm algorithm) {
  switch (algorithm) {
    case FlopAlgorithm::kZf: return "zf";
    case FlopAlgorithm::kWmmse: return "wmmse";
    case FlopAlgorithm::kProposed: return "proposed";
  }
  return "unknown";
}

double flop_count(FlopAlgorithm algorithm, int n_users, int n_tx, int iterations) {
  if (n_users < 1 || n_tx < 1) throw InvalidArgument("FLOP count needs positive dimensions");
  const double u = n_users;
  const double t = n_tx;
  switch (algorithm) {
    case FlopAlgorithm::kZf:
      return 7.0 * (2.0 / 3.0 * u * u * u + 2.0 * u * u * t);
    case FlopAlgorithm::kWmmse:
      if (iterations < 1) throw InvalidArgument("WMMSE FLOP count needs iterations >= 1");
      return iterations * (14.0 / 3.0 * u * t * t * t + 12.0 * u * u * t * t + 12.0 * u * u * t +
                           9.0 * u * t * t + 8.0 * u * t + 5.0 * u * u + 68.0 / 3.0 * u);
    case FlopAlgorithm::kProposed:
      return (std::ldexp(1.0, 19) + std::ldexp(1.0, 21)) * u + 2048.0 * u * u + 1024.0 * u * t;
  }
  throw InvalidArgument("unknown FLOP algorithm");
}

double round_significant(double x, int digits) {
  if (digits < 1) throw InvalidArgument("digits must be >= 1");
  if (x == 0.0 || !std::isfinite(x)) return x;
  const int magnitude = static_cast<int>(std::floor(std::log10(std::abs(x))));
  const double scale = std::pow(10.0, digits - 1 - magnitude);
  return std::round(x * scale) / scale;
}

FlopReport flop_report(FlopAlgorithm algorithm, int n_users, int n_tx, int iterations) {
  FlopReport r;
  r.algorithm = algorithm;
  r.flops = flop_count(algorithm, n_users, n_tx, iterations);
  r.millions = r.flops / 1e6;
  r.display_millions = round_significant(r.millions, 2);
  return r;
}

std::vector<LayerFlops> model_flop_audit(const ModelHyper& hyper) {
  hyper.validate();
  const double u = hyper.n_users;
  const double t = hyper.n_tx;
  const double d = hyper.embed_dim;
  const double f = hyper.ffn_dim;
  const double heads = hyper.n_heads;
  const double len = hyper.seq_len();
  constexpr double kLayerNorm = 8.0;  // per element: mean, variance, scale, shift
  constexpr double kGelu = 8.0;       // tanh approximation per element
  constexpr double kSoftmax = 5.0;    // max, subtract, exp, sum, divide

  std::vector<LayerFlops> out;
  out.push_back({"csi_embedding", u * (2.0 * 2.0 * t * d + d + d)});
  out.push_back({"rate_embedding", u + 2.0 * u * d + d});
  if (hyper.user_positions) out.push_back({"user_position", u * d});
  for (int l = 0; l < hyper.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", kLayerNorm * len * d});
    out.push_back({p + "qkv", 3.0 * len * (2.0 * d * d + d)});
    out.push_back({p + "scores", 2.0 * len * len * d + heads * len * len});
    out.push_back({p + "softmax", kSoftmax * heads * len * len});
    out.push_back({p + "context", 2.0 * len * len * d});
    out.push_back({p + "attn_out", len * (2.0 * d * d + d) + len * d});
    out.push_back({p + "ffn_norm", kLayerNorm * len * d});
    out.push_back({p + "ffn_in", len * (2.0 * d * f + f)});
    out.push_back({p + "gelu", kGelu * len * f});
    out.push_back({p + "ffn_out", len * (2.0 * f * d + d) + len * d});
  }
  out.push_back({"final_norm", kLayerNorm * len * d});
  out.push_back({"precoder_head", u * (2.0 * d * 2.0 * t + 2.0 * t)});
  out.push_back({"pooling", len * d});
  out.push_back({"energy_head", 2.0 * d * (t + 1.0) + (t + 1.0) + 4.0 * (t + 1.0)});
  out.push_back({"normalize", 4.0 * u * t + 2.0 * u * t});
  return out;
}

double total_flops(const std::vector<LayerFlops>& layers) {
  double total = 0.0;
  for (const auto& l : layers) total += l.flops;
  return total;
}

}  // namespace mmfm
