#pragma once

#include <cstdint>
#include <vector>

#include "mmfm/core.hpp"

namespace mmfm {

struct EnvironmentDataset;

// Zero-forcing: W = pinv(conj(H)) rescaled to full power. Throws
// SingularMatrixError when the user Gram matrix is ill-conditioned.
PrecodingSolution zf_precoder(const ChannelMatrix& channel,
                              const SystemConfig& cfg);

struct WmmseOptions {
  int max_iter = 200;
  double tol = 1e-4;  // b/s/Hz improvement below which iteration stops
};

struct WmmseReport {
  CMatrix precoder;
  int iterations = 0;
  // rate_trace[0] is the sum-rate of the ZF initializer, rate_trace[t] the
  // sum-rate after iteration t. A final iteration that lowered the rate is
  // counted in `iterations` but not kept, so the trace may be one shorter.
  std::vector<double> rate_trace;

  double final_rate() const { return rate_trace.back(); }
  PrecodingSolution solution() const {
    return PrecodingSolution::full_power(precoder);
  }
};

WmmseReport wmmse_precoder(const ChannelMatrix& channel,
                           const SystemConfig& cfg,
                           const WmmseOptions& options = {});

// Mean WMMSE sum-rate over n_eval multi-user CSIs drawn from the dataset.
double wmmse_rate_bound(const EnvironmentDataset& dataset,
                        const SystemConfig& cfg, int n_eval,
                        std::uint64_t seed, const WmmseOptions& options = {});

}  // namespace mmfm
