#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpa/data.hpp"
#include "dpa/model.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

/// 1 - cos(u, v), in [0, 2].
double embedding_distance(std::span<const double> u, std::span<const double> v);

/// k = floor(far * N); returns the (k+1)-th smallest distance, so exactly
/// the k smaller distances fall strictly below it (ties excepted).
double far_threshold(std::vector<double> impostor_distances, double far);

struct ASRReport {
  std::string victim;
  double threshold = 0.0;
  std::size_t pairs = 0;
  std::size_t successes = 0;
  double asr = 0.0;  // percent
  std::string metric = "cosine";

  nlohmann::json to_json() const;
  static ASRReport from_json(const nlohmann::json& j);
  bool operator==(const ASRReport&) const = default;
};

/// Success iff distance < threshold (strict).
ASRReport asr_from_distances(std::span<const double> distances, double threshold, const std::string& victim);

/// A verification model. With several members the embedding is the
/// concatenation of each member's unit-norm embedding, so its cosine
/// similarity is the mean of the members' cosines.
struct Victim {
  std::string id;
  std::vector<BackboneParams> members;

  /// Row-wise embeddings of `x` ([N x d] or [d]).
  Tensor embed(const Tensor& x) const;
};

struct VerificationProtocol {
  std::vector<AttackPair> genuine;
  std::vector<AttackPair> impostor;

  /// Every unordered pair of distinct samples in `data`.
  static VerificationProtocol all_pairs(const IdentityDataset& data);
  nlohmann::json counts() const;
};

/// Distances between row embeddings for the listed pairs.
std::vector<double> pair_distances(const Tensor& embeddings, std::span<const AttackPair> pairs);

/// Threshold at `far` over the victim's impostor distances on `eval`.
double victim_threshold(const Victim& victim, const IdentityDataset& eval, double far);

ASRReport asr(std::span<const Tensor> adversarial, std::span<const Tensor> targets, const Victim& victim,
              double threshold);

}  // namespace dpa
