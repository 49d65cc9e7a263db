#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mmfm/core.hpp"

namespace mmfm {

enum class ArrayLayout {
  kUpa,  // square uniform planar array, sqrt(n_tx) x sqrt(n_tx)
  kUla,  // uniform linear array
};

// Parameters of one synthetic propagation environment (one LOS or NLOS split
// of a site). Cluster directions and powers are a fixed function of `seed`,
// so two splits sharing a seed share the scattering geometry.
struct EnvironmentSpec {
  std::string env_id;
  bool los = true;
  int n_clusters = 4;
  double angle_spread = 0.3;  // rad, half-width of the user/cluster sector
  double mean_azimuth = 0.0;
  double mean_elevation = 0.6;
  double rician_k = 10.0;  // LOS/scattered power ratio, 0 for NLOS
  double gain_db_spread = 4.0;
  std::uint64_t seed = 1;
  // Large-scale attenuation applied when users are assembled into a
  // multi-user CSI. Stored channels stay unit-gain.
  double path_loss_db = 0.0;
  int rays_per_cluster = 8;
  double cluster_spread = 0.05;  // rad, intra-cluster angular spread
  ArrayLayout array = ArrayLayout::kUpa;

  void validate() const;
  double path_amplitude() const;
};

struct EnvironmentDataset {
  EnvironmentSpec spec;
  int n_tx = 0;
  std::vector<CVector> channels;

  std::size_t size() const { return channels.size(); }
  // Mean of |h_i|^2 over antennas and samples.
  double mean_antenna_gain() const;
};

// Half-wavelength array response toward (azimuth, elevation). Elevation is the
// polar angle from broadside, so elevation 0 is the all-ones vector.
CVector steering_vector(double azimuth, double elevation,
                        const SystemConfig& cfg,
                        ArrayLayout layout = ArrayLayout::kUpa);

// One single-user channel, normalized to unit mean per-antenna gain.
CVector sample_channel(const EnvironmentSpec& spec, const SystemConfig& cfg,
                       std::mt19937_64& rng);

// n channels drawn with per-sample RNG streams derived from (spec, index) and
// rounded to single precision, the storage precision of dataset files.
EnvironmentDataset generate_dataset(const EnvironmentSpec& spec,
                                    const SystemConfig& cfg, std::size_t n);

// N_U distinct users drawn without replacement, rows in pool order, scaled by
// the environment's path amplitude.
ChannelMatrix build_multiuser_csi(const EnvironmentDataset& dataset,
                                  const SystemConfig& cfg,
                                  std::mt19937_64& rng);
std::vector<std::size_t> sample_user_indices(std::size_t pool,
                                             int n_users,
                                             std::mt19937_64& rng);

// CSIF v1 dataset files. Only env_id and the LOS flag of the spec are stored;
// the remaining generation parameters live in the run configuration.
void write_dataset(const EnvironmentDataset& dataset,
                   const std::filesystem::path& path);
EnvironmentDataset read_dataset(const std::filesystem::path& path);

inline constexpr std::uint32_t kCsifVersion = 1;

// splitmix64 mixing of a base seed with a stream index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace mmfm
