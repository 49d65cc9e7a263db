#pragma once

#include <random>

#include "mmfm/core.hpp"

namespace mmfm::testing {

// i.i.d. CN(0, 1) entries.
inline CMatrix random_complex(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(0.5));
  CMatrix m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = Complex(g(rng), g(rng));
  }
  return m;
}

inline ChannelMatrix random_channel(int n_users, int n_tx, std::mt19937_64& rng) {
  return ChannelMatrix(random_complex(n_users, n_tx, rng));
}

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace mmfm::testing
