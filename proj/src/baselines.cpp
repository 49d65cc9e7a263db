#include "mmfm/baselines.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "mmfm/channelgen.hpp"
#include "mmfm/error.hpp"

namespace mmfm {

namespace {

constexpr double kMaxCondition = 1e12;

// Transmit power of the regularized WMMSE precoder as a function of the dual
// variable, evaluated in the eigenbasis of the weighted covariance.
struct DualPowerCurve {
  RVector eigenvalues;
  RVector weight;  // |U^H B|^2 summed over users, per eigen-direction

  double power(double mu) const {
    double total = 0.0;
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
      const double denom = eigenvalues[i] + mu;
      if (weight[i] == 0.0) continue;
      total += weight[i] / (denom * denom);
    }
    return total;
  }
};

}  // namespace

PrecodingSolution zf_precoder(const ChannelMatrix& channel,
                              const SystemConfig& cfg) {
  channel.validate(cfg);
  const CMatrix a = channel.h.conjugate();  // a(u, :) w = h_u^H w
  const CMatrix gram = a * a.adjoint();
  Eigen::SelfAdjointEigenSolver<CMatrix> eig(gram, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  const double condition =
      lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(condition < kMaxCondition)) {
    std::ostringstream msg;
    msg << "zero-forcing needs full row rank: user Gram matrix condition "
        << condition << " exceeds " << kMaxCondition;
    throw SingularMatrixError(msg.str(), condition);
  }
  const CMatrix raw = a.adjoint() * gram.ldlt().solve(
                                        CMatrix::Identity(cfg.n_users, cfg.n_users));
  return PrecodingSolution::full_power(normalize_precoder(raw, cfg));
}

WmmseReport wmmse_precoder(const ChannelMatrix& channel,
                           const SystemConfig& cfg,
                           const WmmseOptions& options) {
  channel.validate(cfg);
  if (options.max_iter < 1) throw InvalidArgument("max_iter must be >= 1");
  if (!(options.tol > 0.0)) throw InvalidArgument("tol must be positive");

  const int n_users = cfg.n_users;
  const CMatrix a = channel.h.conjugate();

  WmmseReport report;
  try {
    report.precoder = zf_precoder(channel, cfg).precoder;
  } catch (const SingularMatrixError&) {
    // Matched filter for rank-deficient CSI.
    report.precoder = normalize_precoder(a.adjoint(), cfg);
  }
  report.rate_trace.push_back(
      sum_rate(channel, PrecodingSolution::full_power(report.precoder), cfg));

  for (int it = 0; it < options.max_iter; ++it) {
    const CMatrix gains = a * report.precoder;  // gains(u, j) = h_u^H w_j
    CVector receiver(n_users);
    RVector weight(n_users);
    for (int u = 0; u < n_users; ++u) {
      const double total = gains.row(u).squaredNorm() + cfg.noise_power;
      receiver[u] = gains(u, u) / total;
      const double mse = 1.0 - std::norm(gains(u, u)) / total;
      weight[u] = 1.0 / mse;
    }

    // Minimize sum_u weight_u |receiver_u|^2 sum_j |h_u^H w_j|^2 - 2 Re(...)
    // subject to the power budget: w_u = (A + mu I)^{-1} b_u.
    CMatrix cov = CMatrix::Zero(cfg.n_tx, cfg.n_tx);
    CMatrix rhs(cfg.n_tx, n_users);
    for (int u = 0; u < n_users; ++u) {
      const CVector hu = a.row(u).adjoint();
      cov += (weight[u] * std::norm(receiver[u])) * (hu * hu.adjoint());
      rhs.col(u) = (weight[u] * receiver[u]) * hu;
    }
    Eigen::SelfAdjointEigenSolver<CMatrix> eig(cov);
    const CMatrix projected = eig.eigenvectors().adjoint() * rhs;
    DualPowerCurve curve{eig.eigenvalues(), projected.rowwise().squaredNorm()};

    // Directions outside the span of the channels carry no signal; drop them
    // so the unconstrained (mu = 0) solution is the minimum-norm one.
    const double floor = 1e-12 * std::max(eig.eigenvalues().maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < curve.eigenvalues.size(); ++i) {
      if (curve.eigenvalues[i] <= floor) curve.weight[i] = 0.0;
    }

    double mu = 0.0;
    if (curve.power(0.0) > cfg.p_tx) {
      double mu_hi = 1e-12 * std::max(curve.eigenvalues.maxCoeff(), 1.0);
      int doublings = 0;
      while (curve.power(mu_hi) > cfg.p_tx) {
        mu_hi *= 2.0;
        if (++doublings > 2000 || !std::isfinite(mu_hi)) {
          std::ostringstream msg;
          msg << "WMMSE dual bisection failed to bracket the power constraint"
              << " (iteration " << it << ", mu_hi " << mu_hi
              << ", power at mu_hi " << curve.power(mu_hi) << ")";
          throw NumericalError(msg.str());
        }
      }
      double mu_lo = 0.0;
      for (int step = 0; step < 300; ++step) {
        mu = 0.5 * (mu_lo + mu_hi);
        const double p = curve.power(mu);
        if (std::abs(p - cfg.p_tx) <= 1e-10 * cfg.p_tx) break;
        (p > cfg.p_tx ? mu_lo : mu_hi) = mu;
      }
      // Land on the feasible side of the bracket.
      if (curve.power(mu) > cfg.p_tx) mu = mu_hi;
    }

    RVector inverse(curve.eigenvalues.size());
    for (Eigen::Index i = 0; i < inverse.size(); ++i) {
      inverse[i] = curve.weight[i] == 0.0 && curve.eigenvalues[i] <= floor
                       ? 0.0
                       : 1.0 / (curve.eigenvalues[i] + mu);
    }
    CMatrix next = eig.eigenvectors() *
                   (inverse.cast<Complex>().asDiagonal() * projected);
    const double power = next.squaredNorm();
    if (!std::isfinite(power) || power <= 0.0) {
      throw NumericalError("WMMSE precoder update produced power " +
                           std::to_string(power));
    }
    // Scaling every beam up raises every SINR, so the budget is always spent.
    next *= std::sqrt(cfg.p_tx / power);

    const double rate =
        sum_rate(channel, PrecodingSolution::full_power(next), cfg);
    const double previous = report.rate_trace.back();
    report.iterations = it + 1;
    // At very high SNR a step from an already optimal point can lose a few
    // ulps of sum-rate; such a step counts as convergence and is discarded.
    if (rate < previous) break;
    report.precoder = std::move(next);
    report.rate_trace.push_back(rate);
    if (rate - previous < options.tol) break;
  }
  return report;
}

double wmmse_rate_bound(const EnvironmentDataset& dataset,
                        const SystemConfig& cfg, int n_eval,
                        std::uint64_t seed, const WmmseOptions& options) {
  if (n_eval < 1) throw InvalidArgument("n_eval must be >= 1");
  if (dataset.channels.empty()) {
    throw InvalidArgument("cannot bound the rate of an empty dataset");
  }
  std::mt19937_64 rng(seed);
  double total = 0.0;
  for (int i = 0; i < n_eval; ++i) {
    const ChannelMatrix h = build_multiuser_csi(dataset, cfg, rng);
    total += wmmse_precoder(h, cfg, options).final_rate();
  }
  return total / n_eval;
}

}  // namespace mmfm
