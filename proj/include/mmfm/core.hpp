#pragma once

#include <complex>
#include <cstdint>

#include <Eigen/Dense>

namespace mmfm {

using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;
using RVector = Eigen::VectorXd;
using RMatrix = Eigen::MatrixXd;

struct SystemConfig {
  int n_tx = 64;
  int n_users = 4;
  double p_tx = 20.0;          // W, total transmit power budget
  double p_rf = 1.0;           // W per active RF chain
  double noise_power = 1e-13;  // W

  void validate() const;
  // Upper bound of the energy model: full power with every antenna on.
  double max_energy() const { return p_tx + n_tx * p_rf; }
};

// Multi-user CSI. Row u holds the channel vector h_u of user u, so the
// effective gain of beam j at user u is h_u^H w_j = (conj(H) W)(u, j).
struct ChannelMatrix {
  CMatrix h;

  ChannelMatrix() = default;
  explicit ChannelMatrix(CMatrix rows) : h(std::move(rows)) {}

  int n_users() const { return static_cast<int>(h.rows()); }
  int n_tx() const { return static_cast<int>(h.cols()); }
  CVector user(int u) const { return h.row(u).transpose(); }
  void validate(const SystemConfig& cfg) const;
};

// Joint decision variable: precoder W (n_tx x n_users), antenna mask and the
// power scale. The transmitted beam of user u is sqrt(gamma) * (mask .* w_u).
struct PrecodingSolution {
  CMatrix precoder;
  RVector mask;
  double gamma = 1.0;

  // All antennas on, full power.
  static PrecodingSolution full_power(CMatrix precoder);

  // Checks dimensions and the type invariants. `binary_mask` is relaxed only
  // by gradient tests that feed soft masks.
  void validate(const SystemConfig& cfg, bool binary_mask = true) const;
  // sqrt(gamma) * (mask .* W)
  CMatrix effective_beams() const;
};

double sinr(const CVector& h_u, const PrecodingSolution& solution, int u,
            const SystemConfig& cfg);
double user_rate(double sinr_value);

RVector user_rates(const ChannelMatrix& channel,
                   const PrecodingSolution& solution, const SystemConfig& cfg);
double sum_rate(const ChannelMatrix& channel, const PrecodingSolution& solution,
                const SystemConfig& cfg);

double energy(const PrecodingSolution& solution, const SystemConfig& cfg);

// Rescales W so that its total power sum_u w_u^H w_u equals p_tx.
CMatrix normalize_precoder(const CMatrix& raw, const SystemConfig& cfg);

// Gradient of a scalar loss with respect to the precoding solution, given the
// loss sensitivity to each user rate. Complex gradients use the convention
// dL/dRe + i dL/dIm.
struct SolutionGradient {
  CMatrix precoder;
  RVector mask;
  double gamma = 0.0;
};

SolutionGradient user_rates_backward(const ChannelMatrix& channel,
                                     const PrecodingSolution& solution,
                                     const SystemConfig& cfg,
                                     const RVector& loss_wrt_rates);

// Backward of normalize_precoder: maps the gradient on the normalized output
// back to the raw input.
CMatrix normalize_precoder_backward(const CMatrix& raw,
                                    const CMatrix& grad_normalized,
                                    const SystemConfig& cfg);

// Monte-Carlo estimate of the SINR of user u from simulated transmissions
// y_u = h_u^H sum_j sqrt(gamma) (mask .* w_j) x_j + eta with unit-power QPSK
// symbols and circular Gaussian noise of power cfg.noise_power.
double simulate_sinr(const CVector& h_u, const PrecodingSolution& solution,
                     int u, const SystemConfig& cfg, std::int64_t n_symbols,
                     std::uint64_t seed);

}  // namespace mmfm
