#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa {

/// Labeled synthetic identities: each class is a pixel prototype in [0, 255]
/// and samples are prototype + Gaussian noise, clipped to [0, 255].
struct IdentityDataset {
  std::size_t classes = 0;
  std::size_t input_dim = 0;
  std::uint64_t seed = 0;
  double sigma = 0.0;
  Tensor prototypes;  // [s x dim]
  Tensor samples;     // [N x dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor sample(std::size_t i) const { return samples.row(i); }
  Tensor batch(std::span<const std::size_t> indices) const;
  /// SHA-256 of the DPAC encoding.
  std::string fingerprint() const;
};

IdentityDataset generate(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t input_dim,
                         double sigma);

/// Fresh samples around the prototypes of `identities` (same identity space,
/// disjoint draw).
IdentityDataset resample(const IdentityDataset& identities, std::uint64_t seed, std::size_t per_class);

IdentityDataset subset(const IdentityDataset& data, std::span<const std::size_t> indices);

struct DataSplit {
  IdentityDataset train;
  IdentityDataset eval;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> eval_indices;
};

/// Label-stratified split; every class keeps at least one sample per side.
DataSplit split(const IdentityDataset& data, double train_fraction, std::uint64_t seed);

struct AttackPair {
  std::size_t source = 0;
  std::size_t target = 0;
};

struct PairSet {
  std::vector<AttackPair> pairs;
  std::size_t size() const { return pairs.size(); }
};

/// Cross-identity (source, target) pairs drawn uniformly.
PairSet sample_attack_pairs(const IdentityDataset& data, std::size_t count, std::uint64_t seed);

/// Writes `<stem>.dpac` and `<stem>.json` (seed, sigma, class count, hash).
void save_dataset(const std::filesystem::path& stem, const IdentityDataset& data);
IdentityDataset load_dataset(const std::filesystem::path& stem);

}  // namespace dpa
