#include "mmfm/channelgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "binary_io.hpp"
#include "mmfm/error.hpp"

namespace mmfm {

namespace {

constexpr std::array<char, 4> kCsifMagic{'C', 'S', 'I', 'F'};

struct Cluster {
  double azimuth;
  double elevation;
  double power;
};

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<Cluster> site_clusters(const EnvironmentSpec& spec) {
  std::mt19937_64 rng(derive_seed(spec.seed, 0xC1u));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Cluster> clusters(spec.n_clusters);
  double total = 0.0;
  for (auto& c : clusters) {
    c.azimuth = spec.mean_azimuth + spec.angle_spread * unit(rng);
    c.elevation = spec.mean_elevation + 0.5 * spec.angle_spread * unit(rng);
    c.power = std::pow(10.0, spec.gain_db_spread * gauss(rng) / 10.0);
    total += c.power;
  }
  for (auto& c : clusters) c.power /= total;
  return clusters;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void EnvironmentSpec::validate() const {
  if (n_clusters < 1) throw InvalidArgument("n_clusters must be >= 1");
  if (!(angle_spread > 0.0)) throw InvalidArgument("angle_spread must be positive");
  if (!(rician_k >= 0.0)) throw InvalidArgument("rician_k must be non-negative");
  if (rays_per_cluster < 1) throw InvalidArgument("rays_per_cluster must be >= 1");
  if (!(cluster_spread >= 0.0)) throw InvalidArgument("cluster_spread must be non-negative");
  if (env_id.size() > 0xFFFF) throw InvalidArgument("env_id too long");
}

double EnvironmentSpec::path_amplitude() const {
  return std::pow(10.0, -path_loss_db / 20.0);
}

double EnvironmentDataset::mean_antenna_gain() const {
  if (channels.empty()) return 0.0;
  double total = 0.0;
  for (const auto& h : channels) total += h.squaredNorm();
  return total / (static_cast<double>(channels.size()) * n_tx);
}

CVector steering_vector(double azimuth, double elevation,
                        const SystemConfig& cfg, ArrayLayout layout) {
  const double u = std::sin(elevation) * std::cos(azimuth);
  const double v = std::sin(elevation) * std::sin(azimuth);
  CVector a(cfg.n_tx);
  if (layout == ArrayLayout::kUla) {
    for (int m = 0; m < cfg.n_tx; ++m) {
      a[m] = std::polar(1.0, std::numbers::pi * m * u);
    }
    return a;
  }
  const int side = static_cast<int>(std::lround(std::sqrt(cfg.n_tx)));
  if (side * side != cfg.n_tx) {
    throw InvalidArgument("planar array needs a square antenna count, got " +
                          std::to_string(cfg.n_tx));
  }
  for (int m = 0; m < side; ++m) {
    for (int n = 0; n < side; ++n) {
      a[m * side + n] = std::polar(1.0, std::numbers::pi * (m * u + n * v));
    }
  }
  return a;
}

CVector sample_channel(const EnvironmentSpec& spec, const SystemConfig& cfg,
                       std::mt19937_64& rng) {
  spec.validate();
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double user_az = spec.mean_azimuth + spec.angle_spread * unit(rng);
  const double user_el = spec.mean_elevation + 0.5 * spec.angle_spread * unit(rng);
  const CVector los = std::polar(1.0, phase(rng)) *
                      steering_vector(user_az, user_el, cfg, spec.array);

  CVector scattered = CVector::Zero(cfg.n_tx);
  for (const Cluster& c : site_clusters(spec)) {
    const double ray_power = c.power / spec.rays_per_cluster;
    for (int r = 0; r < spec.rays_per_cluster; ++r) {
      const double az = c.azimuth + spec.cluster_spread * gauss(rng);
      const double el = c.elevation + spec.cluster_spread * gauss(rng);
      const Complex g = std::sqrt(ray_power / 2.0) * Complex{gauss(rng), gauss(rng)};
      scattered += g * steering_vector(az, el, cfg, spec.array);
    }
  }

  const double k = spec.rician_k;
  CVector h = std::sqrt(1.0 / (k + 1.0)) * scattered;
  if (k > 0.0) h += std::sqrt(k / (k + 1.0)) * los;
  const double norm2 = h.squaredNorm();
  if (!(norm2 > 0.0) || !std::isfinite(norm2)) {
    throw NumericalError("sampled channel has zero or non-finite gain");
  }
  return h * std::sqrt(cfg.n_tx / norm2);
}

EnvironmentDataset generate_dataset(const EnvironmentSpec& spec,
                                    const SystemConfig& cfg, std::size_t n) {
  spec.validate();
  EnvironmentDataset data;
  data.spec = spec;
  data.n_tx = cfg.n_tx;
  data.channels.reserve(std::min<std::uint32_t>(n, 1u << 16));  // n is untrusted
  const std::uint64_t base = derive_seed(spec.seed, hash_string(spec.env_id));
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(base, i));
    CVector h = sample_channel(spec, cfg, rng);
    for (auto& x : h) {
      x = Complex(static_cast<float>(x.real()), static_cast<float>(x.imag()));
    }
    data.channels.push_back(std::move(h));
  }
  return data;
}

std::vector<std::size_t> sample_user_indices(std::size_t pool, int n_users,
                                             std::mt19937_64& rng) {
  if (n_users < 1 || pool < static_cast<std::size_t>(n_users)) {
    throw InvalidArgument("need at least " + std::to_string(n_users) +
                          " channels, dataset has " + std::to_string(pool));
  }
  // Floyd's algorithm: n_users draws regardless of the pool size.
  std::vector<std::size_t> picked;
  picked.reserve(n_users);
  for (std::size_t j = pool - n_users; j < pool; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j);
    const std::size_t t = pick(rng);
    if (std::find(picked.begin(), picked.end(), t) == picked.end()) {
      picked.push_back(t);
    } else {
      picked.push_back(j);
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

ChannelMatrix build_multiuser_csi(const EnvironmentDataset& dataset,
                                  const SystemConfig& cfg,
                                  std::mt19937_64& rng) {
  if (dataset.n_tx != cfg.n_tx) {
    throw InvalidArgument("dataset antenna count does not match config");
  }
  const auto rows = sample_user_indices(dataset.size(), cfg.n_users, rng);
  const double amplitude = dataset.spec.path_amplitude();
  CMatrix h(cfg.n_users, cfg.n_tx);
  for (int u = 0; u < cfg.n_users; ++u) {
    h.row(u) = amplitude * dataset.channels[rows[u]].transpose();
  }
  return ChannelMatrix(std::move(h));
}

void write_dataset(const EnvironmentDataset& dataset,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(FormatError::Kind::kIo,
                      "cannot open " + path.string() + " for writing");
  }
  out.write(kCsifMagic.data(), kCsifMagic.size());
  detail::put<std::uint32_t>(out, kCsifVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.n_tx));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.size()));
  detail::put<std::uint8_t>(out, dataset.spec.los ? 1 : 0);
  detail::put_string(out, dataset.spec.env_id);
  for (const auto& h : dataset.channels) {
    if (h.size() != dataset.n_tx) {
      throw InvalidArgument("dataset channel length mismatch");
    }
    for (const auto& x : h) {
      detail::put<float>(out, static_cast<float>(x.real()));
      detail::put<float>(out, static_cast<float>(x.imag()));
    }
  }
  if (!out) {
    throw FormatError(FormatError::Kind::kIo, "write to " + path.string() + " failed");
  }
}

EnvironmentDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  }
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size())) {
    throw FormatError(FormatError::Kind::kTruncated, "CSIF file shorter than its magic");
  }
  if (magic != kCsifMagic) {
    throw FormatError(FormatError::Kind::kBadMagic,
                      "bad magic: " + path.string() + " is not a CSIF file");
  }
  const auto version = detail::get<std::uint32_t>(in, "CSIF", "version");
  if (version != kCsifVersion) {
    throw FormatError(FormatError::Kind::kVersionMismatch,
                      "CSIF version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kCsifVersion) + ")");
  }
  EnvironmentDataset data;
  data.n_tx = static_cast<int>(detail::get<std::uint32_t>(in, "CSIF", "n_tx"));
  const auto n = detail::get<std::uint32_t>(in, "CSIF", "sample count");
  data.spec.los = detail::get<std::uint8_t>(in, "CSIF", "los flag") != 0;
  data.spec.env_id = detail::get_string(in, "CSIF", "env_id");
  data.channels.reserve(std::min<std::uint32_t>(n, 1u << 16));  // n is untrusted
  for (std::uint32_t s = 0; s < n; ++s) {
    CVector h(data.n_tx);
    for (int i = 0; i < data.n_tx; ++i) {
      const float re = detail::get<float>(in, "CSIF", "payload");
      const float im = detail::get<float>(in, "CSIF", "payload");
      h[i] = Complex(re, im);
    }
    data.channels.push_back(std::move(h));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatError::Kind::kTruncated,
                      "CSIF payload longer than its header declares");
  }
  return data;
}

}  // namespace mmfm
