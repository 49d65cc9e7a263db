#include "mmfm/core.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "mmfm/error.hpp"

namespace mmfm {

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

void require_beam_shape(const CVector& h_u, const PrecodingSolution& s, int u) {
  require(h_u.size() == s.precoder.rows(),
          "channel length " + std::to_string(h_u.size()) +
              " does not match precoder rows " +
              std::to_string(s.precoder.rows()));
  require(s.mask.size() == s.precoder.rows(), "mask length mismatch");
  require(u >= 0 && u < s.precoder.cols(), "user index out of range");
  require(s.gamma >= 0.0 && s.gamma <= 1.0, "gamma must lie in [0, 1]");
}

}  // namespace

void SystemConfig::validate() const {
  require(n_users >= 1, "n_users must be >= 1");
  require(n_tx >= n_users, "n_tx must be >= n_users");
  require(p_tx > 0.0, "p_tx must be positive");
  require(p_rf >= 0.0, "p_rf must be non-negative");
  require(noise_power > 0.0, "noise_power must be positive");
}

void ChannelMatrix::validate(const SystemConfig& cfg) const {
  require(n_users() == cfg.n_users && n_tx() == cfg.n_tx,
          "channel is " + std::to_string(n_users()) + "x" +
              std::to_string(n_tx()) + ", config expects " +
              std::to_string(cfg.n_users) + "x" + std::to_string(cfg.n_tx));
  require(h.allFinite(), "channel contains non-finite entries");
}

PrecodingSolution PrecodingSolution::full_power(CMatrix precoder) {
  PrecodingSolution s;
  s.mask = RVector::Ones(precoder.rows());
  s.precoder = std::move(precoder);
  s.gamma = 1.0;
  return s;
}

void PrecodingSolution::validate(const SystemConfig& cfg,
                                 bool binary_mask) const {
  require(precoder.rows() == cfg.n_tx && precoder.cols() == cfg.n_users,
          "precoder must be n_tx x n_users");
  require(mask.size() == cfg.n_tx, "mask must have n_tx entries");
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
  require(precoder.squaredNorm() <= cfg.p_tx * (1.0 + 1e-9),
          "precoder exceeds the transmit power budget");
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    if (binary_mask) {
      require(mask[i] == 0.0 || mask[i] == 1.0, "mask entries must be 0 or 1");
    } else {
      require(mask[i] >= 0.0 && mask[i] <= 1.0, "mask entries must be in [0,1]");
    }
  }
}

CMatrix PrecodingSolution::effective_beams() const {
  return std::sqrt(gamma) * (mask.cast<Complex>().asDiagonal() * precoder);
}

double sinr(const CVector& h_u, const PrecodingSolution& solution, int u,
            const SystemConfig& cfg) {
  require_beam_shape(h_u, solution, u);
  const CVector gains = solution.effective_beams().adjoint() * h_u;
  // gains(j) = conj(h_u^H v_j); only magnitudes matter.
  double interference = 0.0;
  for (Eigen::Index j = 0; j < gains.size(); ++j) {
    if (j != u) interference += std::norm(gains[j]);
  }
  return std::norm(gains[u]) / (interference + cfg.noise_power);
}

double user_rate(double sinr_value) {
  require(sinr_value >= 0.0, "SINR must be non-negative");
  return std::log2(1.0 + sinr_value);
}

RVector user_rates(const ChannelMatrix& channel,
                   const PrecodingSolution& solution, const SystemConfig& cfg) {
  require(channel.n_tx() == solution.precoder.rows() &&
              channel.n_users() == solution.precoder.cols(),
          "channel and precoder dimensions disagree");
  RVector rates(channel.n_users());
  for (int u = 0; u < channel.n_users(); ++u) {
    rates[u] = user_rate(sinr(channel.user(u), solution, u, cfg));
  }
  return rates;
}

double sum_rate(const ChannelMatrix& channel, const PrecodingSolution& solution,
                const SystemConfig& cfg) {
  return user_rates(channel, solution, cfg).sum();
}

double energy(const PrecodingSolution& solution, const SystemConfig& cfg) {
  return solution.gamma * cfg.p_tx + cfg.p_rf * solution.mask.sum();
}

CMatrix normalize_precoder(const CMatrix& raw, const SystemConfig& cfg) {
  const double power = raw.squaredNorm();
  require(power > 0.0, "cannot normalize an all-zero precoder");
  require(std::isfinite(power), "precoder contains non-finite entries");
  return raw * std::sqrt(cfg.p_tx / power);
}

CMatrix normalize_precoder_backward(const CMatrix& raw,
                                    const CMatrix& grad_normalized,
                                    const SystemConfig& cfg) {
  const double n2 = raw.squaredNorm();
  const double n = std::sqrt(n2);
  const double projection =
      (raw.conjugate().cwiseProduct(grad_normalized)).sum().real();
  return std::sqrt(cfg.p_tx) / n * (grad_normalized - raw * (projection / n2));
}

SolutionGradient user_rates_backward(const ChannelMatrix& channel,
                                     const PrecodingSolution& solution,
                                     const SystemConfig& cfg,
                                     const RVector& loss_wrt_rates) {
  const int n_users = channel.n_users();
  const CMatrix masked = solution.mask.cast<Complex>().asDiagonal() *
                         solution.precoder;
  // b(u, j) = h_u^H (mask .* w_j)
  const CMatrix b = channel.h.conjugate() * masked;
  const RMatrix power = solution.gamma * b.cwiseAbs2();

  // dL/dP(u, j), where P(u, j) = gamma |b(u, j)|^2 enters only R_u.
  RMatrix dpower(n_users, n_users);
  for (int u = 0; u < n_users; ++u) {
    const double total = power.row(u).sum() + cfg.noise_power;
    const double interference = total - power(u, u);
    for (int j = 0; j < n_users; ++j) {
      const double c = 1.0 / total - (j != u ? 1.0 / interference : 0.0);
      dpower(u, j) = loss_wrt_rates[u] * c / std::numbers::ln2;
    }
  }

  SolutionGradient grad;
  grad.gamma = dpower.cwiseProduct(b.cwiseAbs2()).sum();
  const CMatrix grad_b =
      (2.0 * solution.gamma) * dpower.cast<Complex>().cwiseProduct(b);
  const CMatrix grad_masked = channel.h.transpose() * grad_b;
  grad.precoder = solution.mask.cast<Complex>().asDiagonal() * grad_masked;
  grad.mask =
      (grad_masked.conjugate().cwiseProduct(solution.precoder)).real().rowwise().sum();
  return grad;
}

double simulate_sinr(const CVector& h_u, const PrecodingSolution& solution,
                     int u, const SystemConfig& cfg, std::int64_t n_symbols,
                     std::uint64_t seed) {
  require_beam_shape(h_u, solution, u);
  require(n_symbols >= 1, "n_symbols must be >= 1");
  const CVector gains = solution.effective_beams().transpose() * h_u.conjugate();
  const Eigen::Index n_streams = gains.size();

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bit(0.5);
  std::normal_distribution<double> noise(0.0, std::sqrt(cfg.noise_power / 2.0));
  const double qpsk = 1.0 / std::numbers::sqrt2;

  double signal_energy = 0.0;
  double disturbance_energy = 0.0;
  for (std::int64_t t = 0; t < n_symbols; ++t) {
    Complex signal{};
    Complex disturbance{noise(rng), noise(rng)};
    for (Eigen::Index j = 0; j < n_streams; ++j) {
      const Complex x{bit(rng) ? qpsk : -qpsk, bit(rng) ? qpsk : -qpsk};
      if (j == u) {
        signal = gains[j] * x;
      } else {
        disturbance += gains[j] * x;
      }
    }
    signal_energy += std::norm(signal);
    disturbance_energy += std::norm(disturbance);
  }
  return signal_energy / disturbance_energy;
}

}  // namespace mmfm
