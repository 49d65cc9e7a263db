#include <doctest.h>

#include <cmath>
#include <random>

#include "mmfm/core.hpp"
#include "mmfm/error.hpp"
#include "test_support.hpp"

using namespace mmfm;
using mmfm::testing::random_channel;
using mmfm::testing::random_complex;
using mmfm::testing::relative_error;

namespace {

SystemConfig config(int n_users, int n_tx, double noise = 1e-13) {
  SystemConfig cfg;
  cfg.n_users = n_users;
  cfg.n_tx = n_tx;
  cfg.noise_power = noise;
  return cfg;
}

PrecodingSolution random_solution(int n_users, int n_tx, const SystemConfig& cfg,
                                  std::mt19937_64& rng, bool binary = true) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PrecodingSolution s;
  s.precoder = normalize_precoder(random_complex(n_tx, n_users, rng), cfg);
  s.mask.resize(n_tx);
  for (int i = 0; i < n_tx; ++i) {
    s.mask[i] = binary ? (unit(rng) < 0.7 ? 1.0 : 0.0) : unit(rng);
  }
  s.mask[0] = 1.0;
  s.gamma = 0.2 + 0.8 * unit(rng);
  return s;
}

// Scalar-by-scalar evaluation of the SINR, written without Eigen products.
double scalar_sinr(const CMatrix& h, const PrecodingSolution& s, int u, double noise) {
  double signal = 0.0, interference = 0.0;
  for (int j = 0; j < s.precoder.cols(); ++j) {
    Complex acc = 0.0;
    for (int i = 0; i < h.cols(); ++i) {
      acc += std::conj(h(u, i)) * std::sqrt(s.gamma) * s.mask[i] * s.precoder(i, j);
    }
    (j == u ? signal : interference) += std::norm(acc);
  }
  return signal / (interference + noise);
}

}  // namespace

TEST_CASE("config validation") {
  SystemConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.n_users = 65;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = SystemConfig{};
  cfg.noise_power = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = SystemConfig{};
  cfg.p_rf = -1.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  CHECK(SystemConfig{}.max_energy() == 84.0);
}

TEST_CASE("sinr closed forms") {
  SystemConfig cfg = config(1, 2, 1.0);
  CVector h(2);
  h << 1.0, 0.0;
  PrecodingSolution s = PrecodingSolution::full_power(CMatrix::Zero(2, 1));
  s.precoder(0, 0) = 1.0;
  CHECK(sinr(h, s, 0, cfg) == doctest::Approx(1.0));
  s.gamma = 0.0;
  CHECK(sinr(h, s, 0, cfg) == 0.0);
  s.gamma = 1.5;
  CHECK_THROWS_AS(sinr(h, s, 0, cfg), InvalidArgument);
  s.gamma = 1.0;
  CHECK_THROWS_AS(sinr(CVector::Ones(3), s, 0, cfg), InvalidArgument);
  CHECK_THROWS_AS(sinr(h, s, 1, cfg), InvalidArgument);
}

TEST_CASE("sinr agrees with a scalar re-evaluation") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const SystemConfig cfg = config(3, 8, 0.05);
    const ChannelMatrix ch = random_channel(3, 8, rng);
    const PrecodingSolution s = random_solution(3, 8, cfg, rng);
    for (int u = 0; u < 3; ++u) {
      CHECK(relative_error(sinr(ch.user(u), s, u, cfg),
                           scalar_sinr(ch.h, s, u, cfg.noise_power)) < 1e-12);
    }
  }
}

TEST_CASE("user_rate") {
  CHECK(user_rate(0.0) == 0.0);
  CHECK(user_rate(1.0) == doctest::Approx(1.0));
  CHECK(user_rate(3.0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(user_rate(-0.5), InvalidArgument);
}

TEST_CASE("sum_rate of orthogonal users with matched beams") {
  const SystemConfig cfg = config(2, 2);
  const ChannelMatrix ch(CMatrix::Identity(2, 2));
  const PrecodingSolution s =
      PrecodingSolution::full_power(std::sqrt(cfg.p_tx / 2.0) * CMatrix::Identity(2, 2));
  CHECK(sum_rate(ch, s, cfg) == doctest::Approx(2.0 * std::log2(1.0 + 10.0 * 1e13)));
  PrecodingSolution off = s;
  off.gamma = 0.0;
  CHECK(sum_rate(ch, off, cfg) == 0.0);
}

TEST_CASE("sum_rate agrees with a scalar re-evaluation") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const SystemConfig cfg = config(4, 16, 0.01);
    const ChannelMatrix ch = random_channel(4, 16, rng);
    const PrecodingSolution s = random_solution(4, 16, cfg, rng);
    double expected = 0.0;
    for (int u = 0; u < 4; ++u) expected += std::log2(1.0 + scalar_sinr(ch.h, s, u, cfg.noise_power));
    CHECK(relative_error(sum_rate(ch, s, cfg), expected) < 1e-12);
  }
}

TEST_CASE("energy model") {
  SystemConfig cfg;
  PrecodingSolution s = PrecodingSolution::full_power(CMatrix::Zero(64, 4));
  CHECK(energy(s, cfg) == 84.0);
  s.gamma = 0.0;
  s.mask.setZero();
  CHECK(energy(s, cfg) == 0.0);
  s.gamma = 0.5;
  s.mask.head(32).setOnes();
  CHECK(energy(s, cfg) == 42.0);
}

TEST_CASE("energy stays within its bounds") {
  std::mt19937_64 rng(3);
  const SystemConfig cfg = config(4, 64);
  for (int trial = 0; trial < 200; ++trial) {
    const PrecodingSolution s = random_solution(4, 64, cfg, rng);
    const double e = energy(s, cfg);
    CHECK(e >= 0.0);
    CHECK(e <= cfg.max_energy());
  }
}

TEST_CASE("normalize_precoder") {
  SystemConfig cfg = config(2, 2);
  const CMatrix w = normalize_precoder(CMatrix::Identity(2, 2), cfg);
  CHECK(w(0, 0).real() == doctest::Approx(std::sqrt(10.0)));
  CHECK(w(1, 1).real() == doctest::Approx(std::sqrt(10.0)));
  CHECK(std::abs(w(0, 1)) == 0.0);
  CHECK((normalize_precoder(w, cfg) - w).norm() <= 1e-12);
  CHECK_THROWS_AS(normalize_precoder(CMatrix::Zero(2, 2), cfg), InvalidArgument);

  std::mt19937_64 rng(4);
  cfg = config(4, 64);
  for (int trial = 0; trial < 100; ++trial) {
    const CMatrix raw = random_complex(64, 4, rng);
    const CMatrix n = normalize_precoder(raw, cfg);
    CHECK(std::abs(n.squaredNorm() - cfg.p_tx) <= 1e-9 * cfg.p_tx);
    CHECK((normalize_precoder(3.7 * raw, cfg) - n).norm() <= 1e-12);
    for (int j = 0; j < 4; ++j) {
      const double cos = std::abs(raw.col(j).dot(n.col(j))) / (raw.col(j).norm() * n.col(j).norm());
      CHECK(cos == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("sinr is non-decreasing in gamma") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const SystemConfig cfg = config(4, 16, 0.1);
  for (int trial = 0; trial < 100; ++trial) {
    const ChannelMatrix ch = random_channel(4, 16, rng);
    PrecodingSolution lo = random_solution(4, 16, cfg, rng);
    PrecodingSolution hi = lo;
    const double a = unit(rng), b = unit(rng);
    lo.gamma = std::min(a, b);
    hi.gamma = std::max(a, b);
    for (int u = 0; u < 4; ++u) {
      CHECK(sinr(ch.user(u), lo, u, cfg) <= sinr(ch.user(u), hi, u, cfg) * (1.0 + 1e-12));
      CHECK(user_rate(sinr(ch.user(u), lo, u, cfg)) >= 0.0);
    }
  }
}

TEST_CASE("monte-carlo transmissions reproduce the analytic sinr") {
  const std::int64_t n = 1'000'000;
  const double tol = 3.0 / std::sqrt(static_cast<double>(n)) + 1e-2;

  SUBCASE("two random users within 1%") {
    std::mt19937_64 rng(6);
    const SystemConfig cfg = config(2, 4, 1.0);
    const ChannelMatrix ch = random_channel(2, 4, rng);
    const PrecodingSolution s = random_solution(2, 4, cfg, rng);
    for (int u = 0; u < 2; ++u) {
      const double exact = sinr(ch.user(u), s, u, cfg);
      const double mc = simulate_sinr(ch.user(u), s, u, cfg, n, 100 + u);
      CHECK(std::abs(mc - exact) / exact < 0.01);
      CHECK(std::abs(mc - exact) / exact <= tol);
    }
  }
  SUBCASE("noiseless single user") {
    std::mt19937_64 rng(7);
    const SystemConfig cfg = config(1, 4, 1e-30);
    const ChannelMatrix ch = random_channel(1, 4, rng);
    const PrecodingSolution s = random_solution(1, 4, cfg, rng);
    const double exact = sinr(ch.user(0), s, 0, cfg);
    const double mc = simulate_sinr(ch.user(0), s, 0, cfg, n, 8);
    // The estimate's spread is that of the sample noise power, about 1/sqrt(n).
    CHECK(std::abs(mc - exact) / exact <= 3.0 / std::sqrt(static_cast<double>(n)));
  }
  SUBCASE("zero power") {
    std::mt19937_64 rng(9);
    const SystemConfig cfg = config(2, 4, 1.0);
    const ChannelMatrix ch = random_channel(2, 4, rng);
    PrecodingSolution s = random_solution(2, 4, cfg, rng);
    s.gamma = 0.0;
    CHECK(simulate_sinr(ch.user(0), s, 0, cfg, 10'000, 1) == 0.0);
  }
  SUBCASE("random instances satisfy the statistical tolerance") {
    std::mt19937_64 rng(10);
    const SystemConfig cfg = config(3, 8, 0.5);
    for (int trial = 0; trial < 5; ++trial) {
      const ChannelMatrix ch = random_channel(3, 8, rng);
      const PrecodingSolution s = random_solution(3, 8, cfg, rng);
      for (int u = 0; u < 3; ++u) {
        const double exact = sinr(ch.user(u), s, u, cfg);
        const double mc = simulate_sinr(ch.user(u), s, u, cfg, 200'000, trial * 10 + u);
        CHECK(std::abs(mc - exact) / exact <= 3.0 / std::sqrt(2e5) + 1e-2);
      }
    }
  }
}

TEST_CASE("simulate_sinr is deterministic in its seed") {
  std::mt19937_64 rng(11);
  const SystemConfig cfg = config(2, 4, 1.0);
  const ChannelMatrix ch = random_channel(2, 4, rng);
  const PrecodingSolution s = random_solution(2, 4, cfg, rng);
  CHECK(simulate_sinr(ch.user(1), s, 1, cfg, 5000, 42) ==
        simulate_sinr(ch.user(1), s, 1, cfg, 5000, 42));
  CHECK_THROWS_AS(simulate_sinr(ch.user(1), s, 1, cfg, 0, 42), InvalidArgument);
}

TEST_CASE("rate gradients match central differences") {
  std::mt19937_64 rng(12);
  const SystemConfig cfg = config(3, 5, 0.2);
  const ChannelMatrix ch = random_channel(3, 5, rng);
  PrecodingSolution s = random_solution(3, 5, cfg, rng, /*binary=*/false);
  RVector weights(3);
  weights << 0.7, -1.3, 2.1;
  auto loss = [&](const PrecodingSolution& x) { return weights.dot(user_rates(ch, x, cfg)); };
  const SolutionGradient g = user_rates_backward(ch, s, cfg, weights);
  const double h = 1e-6;

  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int part = 0; part < 2; ++part) {
        const Complex step = part == 0 ? Complex(h, 0) : Complex(0, h);
        PrecodingSolution up = s, down = s;
        up.precoder(i, j) += step;
        down.precoder(i, j) -= step;
        const double numeric = (loss(up) - loss(down)) / (2 * h);
        const double analytic = part == 0 ? g.precoder(i, j).real() : g.precoder(i, j).imag();
        CHECK(numeric == doctest::Approx(analytic).epsilon(1e-6));
      }
    }
    PrecodingSolution up = s, down = s;
    up.mask[i] += h;
    down.mask[i] -= h;
    CHECK((loss(up) - loss(down)) / (2 * h) == doctest::Approx(g.mask[i]).epsilon(1e-6));
  }
  PrecodingSolution up = s, down = s;
  up.gamma += h;
  down.gamma -= h;
  CHECK((loss(up) - loss(down)) / (2 * h) == doctest::Approx(g.gamma).epsilon(1e-6));
}

TEST_CASE("normalization backward matches central differences") {
  std::mt19937_64 rng(13);
  const SystemConfig cfg = config(2, 3);
  const CMatrix raw = random_complex(3, 2, rng);
  const CMatrix probe = random_complex(3, 2, rng);
  auto f = [&](const CMatrix& x) {
    return (probe.conjugate().cwiseProduct(normalize_precoder(x, cfg))).sum().real();
  };
  const CMatrix g = normalize_precoder_backward(raw, probe, cfg);
  const double h = 1e-6;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      CMatrix a = raw, b = raw;
      a(i, j) += h;
      b(i, j) -= h;
      CHECK((f(a) - f(b)) / (2 * h) == doctest::Approx(g(i, j).real()).epsilon(1e-6));
      a = raw;
      b = raw;
      a(i, j) += Complex(0, h);
      b(i, j) -= Complex(0, h);
      CHECK((f(a) - f(b)) / (2 * h) == doctest::Approx(g(i, j).imag()).epsilon(1e-6));
    }
  }
}

TEST_CASE("solution validation") {
  const SystemConfig cfg = config(2, 4);
  PrecodingSolution s = PrecodingSolution::full_power(normalize_precoder(CMatrix::Ones(4, 2), cfg));
  CHECK_NOTHROW(s.validate(cfg));
  s.mask[1] = 0.5;
  CHECK_THROWS_AS(s.validate(cfg), InvalidArgument);
  CHECK_NOTHROW(s.validate(cfg, false));
  s.mask[1] = 1.0;
  s.precoder *= 1.01;
  CHECK_THROWS_AS(s.validate(cfg), InvalidArgument);
}
