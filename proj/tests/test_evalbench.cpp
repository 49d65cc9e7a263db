#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mmfm/baselines.hpp"
#include "mmfm/error.hpp"
#include "mmfm/evalbench.hpp"
#include "mmfm/training.hpp"
#include "test_support.hpp"

using namespace mmfm;
using mmfm::testing::random_channel;

namespace {

SystemConfig config(int n_users, int n_tx, double noise) {
  SystemConfig cfg;
  cfg.n_users = n_users;
  cfg.n_tx = n_tx;
  cfg.noise_power = noise;
  return cfg;
}

EnvironmentDataset dataset(const std::string& id, double azimuth, std::uint64_t seed,
                           const SystemConfig& cfg, std::size_t n) {
  EnvironmentSpec s;
  s.env_id = id;
  s.mean_azimuth = azimuth;
  s.seed = seed;
  return generate_dataset(s, cfg, n);
}

ModelHyper small_hyper(int n_users, int n_tx) {
  ModelHyper h;
  h.n_users = n_users;
  h.n_tx = n_tx;
  h.embed_dim = 16;
  h.ffn_dim = 32;
  h.n_heads = 2;
  h.n_layers = 1;
  return h;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mmfm_evalbench_" + name);
}

}  // namespace

TEST_CASE("closed-form FLOP counts") {
  // Oracles in exact integer arithmetic (values multiplied by 3).
  const long long u = 4, t = 64, iters = 16;
  const long long zf3 = 7 * (2 * u * u * u + 6 * u * u * t);
  const long long wmmse3 = iters * (14 * u * t * t * t + 36 * u * u * t * t + 36 * u * u * t +
                                    27 * u * t * t + 24 * u * t + 15 * u * u + 68 * u);
  const long long proposed = ((1LL << 19) + (1LL << 21)) * u + 2048 * u * u + 1024 * u * t;

  const double zf = flop_count(FlopAlgorithm::kZf, 4, 64);
  const double wm = flop_count(FlopAlgorithm::kWmmse, 4, 64, 16);
  const double pr = flop_count(FlopAlgorithm::kProposed, 4, 64);
  CHECK(std::abs(3.0 * zf - static_cast<double>(zf3)) < 1e-6);
  CHECK(std::abs(3.0 * wm - static_cast<double>(wmmse3)) < 1e-4);
  CHECK(pr == static_cast<double>(proposed));

  // Published table values 0.014, 93.5 and 10.8 (millions).
  CHECK(std::abs(zf / 1e6 - 0.014) <= 0.05);
  CHECK(std::abs(wm / 1e6 - 93.5) <= 0.05);
  CHECK(std::abs(pr / 1e6 - 10.8) <= 0.05);
  const double ratio = wm / pr;
  CHECK(ratio >= 8.0);
  CHECK(ratio <= 9.0);

  // The 2-significant-figure display rounds 0.014635 up, not down.
  CHECK(flop_report(FlopAlgorithm::kZf, 4, 64).display_millions == doctest::Approx(0.015));
  CHECK(flop_report(FlopAlgorithm::kWmmse, 4, 64, 16).display_millions == 93.0);
  CHECK(flop_report(FlopAlgorithm::kProposed, 4, 64).display_millions == 11.0);
  CHECK(flop_report(FlopAlgorithm::kProposed, 4, 64).millions == doctest::Approx(10.780672));

  // WMMSE is linear in the iteration count.
  CHECK(flop_count(FlopAlgorithm::kWmmse, 4, 64, 32) == doctest::Approx(2.0 * wm));
}

TEST_CASE("FLOP argument handling") {
  CHECK(parse_flop_algorithm("zf") == FlopAlgorithm::kZf);
  CHECK(parse_flop_algorithm("wmmse") == FlopAlgorithm::kWmmse);
  CHECK(parse_flop_algorithm("proposed") == FlopAlgorithm::kProposed);
  CHECK(to_string(FlopAlgorithm::kWmmse) == "wmmse");
  CHECK_THROWS_AS(parse_flop_algorithm("mmse"), InvalidArgument);
  CHECK_THROWS_AS(flop_count(FlopAlgorithm::kZf, 0, 64), InvalidArgument);
  CHECK_THROWS_AS(flop_count(FlopAlgorithm::kWmmse, 4, 64, 0), InvalidArgument);
}

TEST_CASE("significant-figure rounding") {
  CHECK(round_significant(93.467989, 2) == 93.0);
  CHECK(round_significant(10.780672, 2) == 11.0);
  CHECK(round_significant(0.0146347, 2) == doctest::Approx(0.015));
  CHECK(round_significant(-1234.5, 3) == -1230.0);
  CHECK(round_significant(0.0, 2) == 0.0);
  CHECK(round_significant(95.0, 1) == 100.0);
  CHECK_THROWS_AS(round_significant(1.0, 0), InvalidArgument);
}

TEST_CASE("per-layer FLOP audit") {
  ModelHyper h;  // default dimensions
  const auto layers = model_flop_audit(h);
  const double total = total_flops(layers);
  for (const auto& l : layers) CHECK(l.flops > 0.0);
  // Dominant terms by hand: 4 blocks of Q/K/V/out projections and the FFN on
  // 5 tokens, plus the CSI embedding and the precoder head.
  const double d = 128, f = 1024, len = 5, t = 64, u = 4;
  const double matmuls = 4 * (4 * len * 2 * d * d + 2 * len * 2 * d * f) +
                         u * 2 * (2 * t) * d + u * 2 * d * (2 * t) + 2 * d * (t + 1);
  CHECK(total > matmuls);
  CHECK(total < 1.05 * matmuls);
  const auto it = std::find_if(layers.begin(), layers.end(),
                               [](const LayerFlops& l) { return l.name == "block0.ffn_in"; });
  REQUIRE(it != layers.end());
  CHECK(it->flops == len * (2 * d * f + f));
  MESSAGE("audit total at default dimensions: " << total / 1e6 << "M");

  h.user_positions = false;
  const auto without = model_flop_audit(h);
  CHECK(without.size() + 1 == layers.size());
}

TEST_CASE("spearman correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {1, 4, 9, 16}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
  // Ties: ranks x = (1.5, 1.5, 3), y = (1, 2, 3); Pearson of the ranks.
  const double rx[] = {1.5, 1.5, 3}, ry[] = {1, 2, 3};
  double mx = 2, my = 2, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  CHECK(spearman({5, 5, 7}, {1, 2, 3}) == doctest::Approx(sxy / std::sqrt(sxx * syy)));
  CHECK_THROWS_AS(spearman({1, 2}, {1}), InvalidArgument);
}

TEST_CASE("trade-off points") {
  const SystemConfig cfg = config(3, 8, 1.0);
  std::mt19937_64 rng(3);
  const ChannelMatrix h = random_channel(3, 8, rng);
  const PrecodingSolution zf = zf_precoder(h, cfg);

  SUBCASE("a policy that meets its request exactly has zero error") {
    const RateRequest request{user_rates(h, zf, cfg)};
    const TradeoffPoint p = make_tradeoff_point(h, zf, request, cfg);
    CHECK(p.mean_relative_rate_error == 0.0);
    CHECK(p.positive_targets == 3);
    CHECK(p.requested_sum_rate == doctest::Approx(p.achieved_sum_rate));
  }
  SUBCASE("all-zero request skips the error term") {
    const TradeoffPoint p = make_tradeoff_point(h, zf, RateRequest::uniform(3, 0.0), cfg);
    CHECK(p.positive_targets == 0);
    CHECK(p.mean_relative_rate_error == 0.0);
    CHECK(p.requested_sum_rate == 0.0);
    CHECK(p.achieved_sum_rate > 0.0);
  }
  SUBCASE("error is averaged over positive targets only") {
    const RVector rates = user_rates(h, zf, cfg);
    RateRequest request{RVector::Zero(3)};
    request.targets(0) = 2.0 * rates(0);
    request.targets(2) = 0.5 * rates(2);
    const TradeoffPoint p = make_tradeoff_point(h, zf, request, cfg);
    CHECK(p.positive_targets == 2);
    CHECK(p.mean_relative_rate_error == doctest::Approx((0.5 + 1.0) / 2.0));
  }
  SUBCASE("all antennas on at full power costs the maximum energy") {
    const TradeoffPoint p = make_tradeoff_point(h, zf, RateRequest::uniform(3, 1.0), cfg);
    CHECK(p.energy == cfg.p_tx + cfg.n_tx * cfg.p_rf);
  }
}

TEST_CASE("sweep summary") {
  std::vector<TradeoffPoint> pts;
  for (int i = 0; i < 50; ++i) {
    TradeoffPoint p;
    p.requested_sum_rate = i;
    p.achieved_sum_rate = i;
    p.energy = 10.0 + i + ((i % 2 == 0) ? 0.8 : -0.8);  // noisy but increasing
    p.positive_targets = i == 0 ? 0 : 2;
    p.mean_relative_rate_error = i == 0 ? 0.0 : 0.1 * (i % 3);
    pts.push_back(p);
  }
  const SweepSummary s = summarize_sweep(pts);
  CHECK(s.n_points == 50);
  double expected = 0.0;
  for (int i = 1; i < 50; ++i) expected += 0.1 * (i % 3);
  CHECK(s.mean_relative_rate_error == doctest::Approx(expected / 49.0));
  CHECK(s.median_relative_rate_error == doctest::Approx(0.1));
  CHECK(s.spearman_energy > 0.9);
  CHECK(s.spearman_energy_deciles == doctest::Approx(1.0));
  REQUIRE(s.decile_request.size() == 10);
  CHECK(s.decile_request.front() == doctest::Approx(2.0));
  CHECK(s.decile_energy.front() == doctest::Approx(12.0 + 0.8 / 5.0));
  CHECK(!s.to_json().empty());

  const SweepSummary empty = summarize_sweep({});
  CHECK(empty.n_points == 0);
  CHECK(empty.decile_request.empty());
}

TEST_CASE("trade-off files round-trip") {
  std::vector<TradeoffPoint> pts(4);
  pts[0] = {0.1, 0.30000000000000004, 1e-300, 0.0, 0};
  pts[1] = {12.5, 11.0, 84.0, 0.123456789012345678, 4};
  pts[2] = {3.0e5, 1.0 / 3.0, 22.2, 5.5e-17, 1};
  pts[3] = {};

  const auto csv = temp_file("roundtrip.csv");
  write_tradeoff_csv(pts, csv);
  CHECK(read_tradeoff_csv(csv) == pts);
  CHECK(tradeoff_from_json(tradeoff_to_json(pts)) == pts);

  {
    std::ofstream out(csv);
    out << "a,b,c\n1,2,3\n";
  }
  try {
    (void)read_tradeoff_csv(csv);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::kBadMagic);
  }
  {
    std::ofstream out(csv);
    out << "requested_sum_rate,achieved_sum_rate,energy,mean_relative_rate_error,"
           "positive_targets\n1,2,x,0,1\n";
  }
  CHECK_THROWS_AS(read_tradeoff_csv(csv), FormatError);
  {
    std::ofstream out(csv);
    out << "requested_sum_rate,achieved_sum_rate,energy,mean_relative_rate_error,"
           "positive_targets\n1,2,3\n";
  }
  CHECK_THROWS_AS(read_tradeoff_csv(csv), FormatError);
  std::filesystem::remove(csv);
  try {
    (void)read_tradeoff_csv(csv);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatError::Kind::kIo);
  }
  CHECK_THROWS_AS(tradeoff_from_json("[{\"energy\": 1}]"), FormatError);
}

TEST_CASE("max sum-rate evaluation") {
  const SystemConfig cfg = config(2, 16, 1.0);
  const EnvironmentDataset data = dataset("s", 0.2, 4, cfg, 40);

  SUBCASE("WMMSE as the policy reproduces the WMMSE rate bound") {
    const MaxRateResult r = max_sum_rate_eval(wmmse_policy(cfg), data, cfg, 25, 17);
    CHECK(r.model == wmmse_rate_bound(data, cfg, 25, 17));
    CHECK(r.wmmse == r.model);
    CHECK(r.zf <= r.wmmse + 1e-9);
    CHECK(r.model_energy == cfg.max_energy());
  }
  SUBCASE("all antennas on with full power") {
    const Policy all_on = [&](const ChannelMatrix& h, const RateRequest&) {
      return zf_precoder(h, cfg);
    };
    const MaxRateResult r = max_sum_rate_eval(all_on, data, cfg, 10, 3, false);
    CHECK(r.model_energy == cfg.p_tx + cfg.n_tx * cfg.p_rf);
    CHECK(r.model == r.zf);
    CHECK(r.wmmse == 0.0);
  }
  SUBCASE("the model policy matches a direct forward pass") {
    const ModelHyper hyper = small_hyper(2, 16);
    const FeatureExtractor theta = FeatureExtractor::initialized(hyper, 1);
    const OutputHead head = OutputHead::initialized(hyper, 2);
    const MaxRateResult r =
        max_sum_rate_eval(model_policy(theta, head, hyper, cfg), data, cfg, 5, 9, false);
    std::mt19937_64 rng(9);
    double total = 0.0;
    for (int i = 0; i < 5; ++i) {
      const ChannelMatrix h = build_multiuser_csi(data, cfg, rng);
      std::mt19937_64 unused(0);
      total += sum_rate(h,
                        forward(theta, head, hyper, cfg, h,
                                RateRequest::uniform(2, kMaxRateRequest), Mode::kEval, unused)
                            .solution,
                        cfg);
    }
    CHECK(r.model == doctest::Approx(total / 5).epsilon(1e-12));
  }
  CHECK_THROWS_AS(max_sum_rate_eval(wmmse_policy(cfg), data, cfg, 0, 1), InvalidArgument);
}

TEST_CASE("ZF does not beat WMMSE on average at the default noise power") {
  const SystemConfig cfg = config(4, 16, 1e-13);
  std::mt19937_64 rng(21);
  double zf = 0.0, wm = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const ChannelMatrix h = random_channel(4, 16, rng);
    zf += sum_rate(h, zf_precoder(h, cfg), cfg);
    wm += wmmse_precoder(h, cfg).final_rate();
  }
  CHECK(zf <= wm);
}

TEST_CASE("trade-off sweep") {
  const SystemConfig cfg = config(2, 16, 1.0);
  const EnvironmentDataset data = dataset("s", -0.3, 8, cfg, 40);
  const ModelHyper hyper = small_hyper(2, 16);
  const FeatureExtractor theta = FeatureExtractor::initialized(hyper, 4);
  const OutputHead head = OutputHead::initialized(hyper, 5);
  const Policy policy = model_policy(theta, head, hyper, cfg);

  const auto a = tradeoff_sweep(policy, data, cfg, 6.0, 60, 2);
  const auto b = tradeoff_sweep(policy, data, cfg, 6.0, 60, 2);
  CHECK(a == b);
  REQUIRE(a.size() == 60);
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(a[i - 1].achieved_sum_rate <= a[i].achieved_sum_rate);
  }
  for (const auto& p : a) {
    CHECK(p.requested_sum_rate >= 0.0);
    CHECK(p.requested_sum_rate <= 6.0 + 1e-12);
    CHECK(p.achieved_sum_rate >= 0.0);
    CHECK(p.energy >= 0.0);
    CHECK(p.mean_relative_rate_error >= 0.0);
  }
  CHECK(tradeoff_sweep(policy, data, cfg, 6.0, 60, 3) != a);
  CHECK_THROWS_AS(tradeoff_sweep(policy, data, cfg, 6.0, 0, 2), InvalidArgument);
}

TEST_CASE("cross-site matrix") {
  const SystemConfig cfg = config(2, 16, 1.0);
  const ModelHyper hyper = small_hyper(2, 16);
  const FeatureExtractor theta = FeatureExtractor::initialized(hyper, 6);
  const EnvironmentDataset d0 = dataset("a", -0.8, 1, cfg, 30);
  const EnvironmentDataset d1 = dataset("b", 0.0, 2, cfg, 30);
  const EnvironmentDataset d2 = dataset("c", 0.8, 3, cfg, 30);
  const std::vector<OutputHead> heads{OutputHead::initialized(hyper, 10),
                                      OutputHead::initialized(hyper, 11),
                                      OutputHead::initialized(hyper, 12)};

  SUBCASE("a single environment is the in-environment evaluation") {
    const RMatrix t = cross_site_matrix(theta, {heads[0]}, {&d0}, hyper, cfg, 8, 4);
    REQUIRE(t.rows() == 1);
    const double direct =
        max_sum_rate_eval(model_policy(theta, heads[0], hyper, cfg), d0, cfg, 8, 4, false).model;
    CHECK(t(0, 0) == direct);
    CHECK(off_diagonal_mean(t) == 0.0);
  }
  SUBCASE("relabeling environments permutes the table") {
    const RMatrix t = cross_site_matrix(theta, heads, {&d0, &d1, &d2}, hyper, cfg, 8, 4);
    const int perm[] = {2, 0, 1};
    const RMatrix p = cross_site_matrix(theta, {heads[2], heads[0], heads[1]},
                                        {&d2, &d0, &d1}, hyper, cfg, 8, 4);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) CHECK(p(i, j) == t(perm[i], perm[j]));
    }
    CHECK(diagonal_mean(p) == doctest::Approx(diagonal_mean(t)));
    CHECK(off_diagonal_mean(p) == doctest::Approx(off_diagonal_mean(t)));
    CHECK(diagonal_mean(t) == doctest::Approx(t.trace() / 3.0));
    CHECK(off_diagonal_mean(t) == doctest::Approx((t.sum() - t.trace()) / 6.0));
  }
  CHECK_THROWS_AS(cross_site_matrix(theta, heads, {&d0}, hyper, cfg, 8, 4), InvalidArgument);
}
