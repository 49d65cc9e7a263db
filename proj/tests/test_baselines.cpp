#include <doctest.h>

#include <cmath>
#include <random>

#include "mmfm/baselines.hpp"
#include "mmfm/channelgen.hpp"
#include "mmfm/error.hpp"
#include "test_support.hpp"

using namespace mmfm;
using mmfm::testing::random_channel;
using mmfm::testing::relative_error;

namespace {

SystemConfig config(int n_users, int n_tx, double noise) {
  SystemConfig cfg;
  cfg.n_users = n_users;
  cfg.n_tx = n_tx;
  cfg.noise_power = noise;
  return cfg;
}

double max_leakage(const ChannelMatrix& ch, const CMatrix& w) {
  double worst = 0.0;
  for (int u = 0; u < ch.n_users(); ++u) {
    for (int j = 0; j < w.cols(); ++j) {
      if (j == u) continue;
      const double leak = std::abs(ch.user(u).dot(w.col(j)));
      worst = std::max(worst, leak / (ch.user(u).norm() * w.col(j).norm()));
    }
  }
  return worst;
}

// Best interference-free sum-rate over a uniform grid of power splits.
double grid_search_rate(double g1, double g2, double p_tx, double noise, int points) {
  double best = 0.0;
  for (int k = 0; k <= points; ++k) {
    const double p1 = p_tx * k / points;
    best = std::max(best, std::log2(1.0 + p1 * g1 / noise) +
                              std::log2(1.0 + (p_tx - p1) * g2 / noise));
  }
  return best;
}

}  // namespace

TEST_CASE("zero-forcing on simple channels") {
  SUBCASE("scaled identity gives a diagonal precoder") {
    const SystemConfig cfg = config(2, 2, 1e-13);
    const PrecodingSolution s = zf_precoder(ChannelMatrix(3.0 * CMatrix::Identity(2, 2)), cfg);
    CHECK(std::abs(s.precoder(0, 1)) < 1e-15);
    CHECK(std::abs(s.precoder(1, 0)) < 1e-15);
    CHECK(s.gamma == 1.0);
    CHECK(s.mask.isOnes());
  }
  SUBCASE("orthogonal rows give matched filters") {
    const SystemConfig cfg = config(2, 4, 1e-13);
    CMatrix h = CMatrix::Zero(2, 4);
    h(0, 0) = Complex(1, 1);
    h(0, 1) = Complex(0, 2);
    h(1, 2) = Complex(-1, 0.5);
    h(1, 3) = Complex(3, 0);
    const PrecodingSolution s = zf_precoder(ChannelMatrix(h), cfg);
    for (int u = 0; u < 2; ++u) {
      const CVector hu = h.row(u).transpose();
      const double cos = std::abs(hu.dot(s.precoder.col(u))) / (hu.norm() * s.precoder.col(u).norm());
      CHECK(cos == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("zero-forcing matches an SVD pseudo-inverse and nulls interference") {
  std::mt19937_64 rng(1);
  const SystemConfig cfg = config(4, 64, 1e-13);
  for (int trial = 0; trial < 200; ++trial) {
    const ChannelMatrix ch = random_channel(4, 64, rng);
    const PrecodingSolution s = zf_precoder(ch, cfg);
    Eigen::JacobiSVD<CMatrix> svd(ch.h.conjugate(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const RVector sv = svd.singularValues();
    const CMatrix pinv = svd.matrixV() * sv.cwiseInverse().cast<Complex>().asDiagonal() *
                         svd.matrixU().adjoint();
    const CMatrix oracle = pinv * std::sqrt(cfg.p_tx / pinv.squaredNorm());
    CHECK((s.precoder - oracle).norm() <= 1e-10 * oracle.norm());
    CHECK(max_leakage(ch, s.precoder) <= 1e-9);
    CHECK(std::abs(s.precoder.squaredNorm() - cfg.p_tx) <= 1e-9 * cfg.p_tx);
  }
}

TEST_CASE("zero-forcing rejects rank-deficient CSI") {
  const SystemConfig cfg = config(2, 4, 1e-13);
  CMatrix h(2, 4);
  h.row(0) << 1, 2, 3, 4;
  h.row(1) = 2.0 * h.row(0);
  try {
    zf_precoder(ChannelMatrix(h), cfg);
    FAIL("expected SingularMatrixError");
  } catch (const SingularMatrixError& e) {
    CHECK(e.condition() > 1e12);
    CHECK(std::string(e.what()).find("condition") != std::string::npos);
  }
}

TEST_CASE("WMMSE recovers the matched filter for one user") {
  std::mt19937_64 rng(2);
  const SystemConfig cfg = config(1, 16, 0.1);
  for (int trial = 0; trial < 20; ++trial) {
    const ChannelMatrix ch = random_channel(1, 16, rng);
    const WmmseReport r = wmmse_precoder(ch, cfg);
    const CVector h = ch.user(0);
    const CVector w = r.precoder.col(0);
    CHECK(1.0 - std::abs(h.dot(w)) / (h.norm() * w.norm()) < 1e-6);
    CHECK(w.squaredNorm() == doctest::Approx(cfg.p_tx).epsilon(1e-9));
    CHECK(r.iterations >= 1);
  }
}

TEST_CASE("WMMSE power split on orthogonal users matches a grid search") {
  for (double g2 : {1.0, 0.3, 0.05}) {
    const SystemConfig cfg = config(2, 4, 1.0);
    CMatrix h = CMatrix::Zero(2, 4);
    h(0, 0) = 1.0;
    h(1, 3) = std::sqrt(g2);
    const WmmseReport r = wmmse_precoder(ChannelMatrix(h), cfg, {.max_iter = 2000, .tol = 1e-12});
    const double oracle = grid_search_rate(1.0, g2, cfg.p_tx, cfg.noise_power, 10'000);
    CHECK(std::abs(r.final_rate() - oracle) <= 1e-3);
  }
}

TEST_CASE("WMMSE rate trace is monotone and dominates zero-forcing") {
  std::mt19937_64 rng(3);
  for (double noise : {1e-13, 1.0, 10.0}) {
    const SystemConfig cfg = config(4, 16, noise);
    for (int trial = 0; trial < 100; ++trial) {
      const ChannelMatrix ch = random_channel(4, 16, rng);
      const WmmseReport r = wmmse_precoder(ch, cfg);
      for (std::size_t t = 1; t < r.rate_trace.size(); ++t) {
        CHECK(r.rate_trace[t] >= r.rate_trace[t - 1] - 1e-9);
      }
      CHECK(r.final_rate() >= sum_rate(ch, zf_precoder(ch, cfg), cfg) - 1e-9);
      CHECK(r.precoder.squaredNorm() <= cfg.p_tx * (1.0 + 1e-9));
      CHECK(r.rate_trace.size() <= static_cast<std::size_t>(r.iterations) + 1);
      CHECK(r.rate_trace.size() >= static_cast<std::size_t>(r.iterations));
    }
  }
}

TEST_CASE("WMMSE option validation") {
  const SystemConfig cfg = config(1, 2, 1.0);
  const ChannelMatrix ch(CMatrix::Ones(1, 2));
  CHECK_THROWS_AS(wmmse_precoder(ch, cfg, {.max_iter = 0}), InvalidArgument);
  CHECK_THROWS_AS(wmmse_precoder(ch, cfg, {.max_iter = 5, .tol = 0.0}), InvalidArgument);
}

TEST_CASE("WMMSE rate bound") {
  SystemConfig cfg = config(2, 4, 1.0);

  SUBCASE("identical orthogonal instances give the closed-form rate") {
    EnvironmentDataset d;
    d.n_tx = 4;
    CVector a = CVector::Zero(4), b = CVector::Zero(4);
    a[0] = 1.0;
    b[2] = 1.0;
    d.channels = {a, b};
    const double expected = 2.0 * std::log2(1.0 + cfg.p_tx / 2.0 / cfg.noise_power);
    CHECK(wmmse_rate_bound(d, cfg, 5, 1) == doctest::Approx(expected).epsilon(1e-6));
  }

  EnvironmentSpec spec;
  spec.env_id = "bound";
  spec.array = ArrayLayout::kUla;
  const EnvironmentDataset data = generate_dataset(spec, cfg, 50);

  SUBCASE("one instance equals its own WMMSE rate") {
    std::mt19937_64 rng(9);
    const ChannelMatrix h = build_multiuser_csi(data, cfg, rng);
    CHECK(wmmse_rate_bound(data, cfg, 1, 9) == wmmse_precoder(h, cfg).final_rate());
  }
  SUBCASE("deterministic in its seed") {
    CHECK(wmmse_rate_bound(data, cfg, 20, 4) == wmmse_rate_bound(data, cfg, 20, 4));
  }
  SUBCASE("rejects empty input") {
    EnvironmentDataset empty;
    empty.n_tx = 4;
    CHECK_THROWS_AS(wmmse_rate_bound(empty, cfg, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(wmmse_rate_bound(data, cfg, 0, 1), InvalidArgument);
  }
}
