#include "dpa/evaluator.hpp"

#include <algorithm>
#include <cmath>

#include "dpa/errors.hpp"

namespace dpa {

double embedding_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("embedding_distance: length mismatch");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu <= 0.0 || vv <= 0.0) throw DegenerateEmbeddingError("embedding_distance: zero vector");
  const double cosine = dot / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(1.0 - cosine, 0.0, 2.0);
}

double far_threshold(std::vector<double> impostor_distances, double far) {
  if (impostor_distances.empty()) throw ValueError("far_threshold: no impostor distances");
  if (!(far >= 0.0 && far < 1.0)) throw ValueError("far_threshold: far must lie in [0, 1)");
  std::sort(impostor_distances.begin(), impostor_distances.end());
  const auto k = static_cast<std::size_t>(std::floor(far * static_cast<double>(impostor_distances.size())));
  return impostor_distances[k];
}

nlohmann::json ASRReport::to_json() const {
  return {{"victim", victim},       {"threshold", threshold}, {"pairs", pairs},
          {"successes", successes}, {"asr", asr},             {"metric", metric}};
}

ASRReport ASRReport::from_json(const nlohmann::json& j) {
  ASRReport r;
  r.victim = j.at("victim").get<std::string>();
  r.threshold = j.at("threshold").get<double>();
  r.pairs = j.at("pairs").get<std::size_t>();
  r.successes = j.at("successes").get<std::size_t>();
  r.asr = j.at("asr").get<double>();
  r.metric = j.at("metric").get<std::string>();
  if (r.successes > r.pairs || r.asr < 0.0 || r.asr > 100.0) throw FormatError("ASR report: inconsistent counts");
  return r;
}

ASRReport asr_from_distances(std::span<const double> distances, double threshold, const std::string& victim) {
  if (distances.empty()) throw ValueError("asr: no adversarial examples");
  ASRReport r;
  r.victim = victim;
  r.threshold = threshold;
  r.pairs = distances.size();
  r.successes = static_cast<std::size_t>(std::count_if(distances.begin(), distances.end(),
                                                       [&](double d) { return d < threshold; }));
  r.asr = 100.0 * static_cast<double>(r.successes) / static_cast<double>(r.pairs);
  return r;
}

Tensor Victim::embed(const Tensor& x) const {
  if (members.empty()) throw ValueError("victim '" + id + "' has no members");
  const Tensor in = x.rank() == 1 ? x.reshaped(Shape{1, x.size()}) : x;
  const std::size_t n = in.rows();
  std::vector<Tensor> parts;
  std::size_t width = 0;
  for (const auto& m : members) {
    parts.push_back(embed_values(m, in));
    width += parts.back().cols();
  }
  Tensor out(Shape{n, width});
  std::size_t offset = 0;
  for (const auto& e : parts) {
    const std::size_t r = e.cols();
    for (std::size_t i = 0; i < n; ++i) {
      double norm = 0.0;
      for (std::size_t k = 0; k < r; ++k) norm += e.at(i, k) * e.at(i, k);
      norm = std::sqrt(norm);
      if (!(norm > 1e-12)) throw DegenerateEmbeddingError("victim '" + id + "': zero embedding");
      for (std::size_t k = 0; k < r; ++k) out.at(i, offset + k) = e.at(i, k) / norm;
    }
    offset += r;
  }
  return out;
}

VerificationProtocol VerificationProtocol::all_pairs(const IdentityDataset& data) {
  VerificationProtocol p;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = i + 1; j < data.size(); ++j) {
      (data.labels[i] == data.labels[j] ? p.genuine : p.impostor).push_back({i, j});
    }
  }
  if (p.impostor.empty()) throw ValueError("verification protocol: no impostor pairs");
  return p;
}

nlohmann::json VerificationProtocol::counts() const {
  return {{"genuine", genuine.size()}, {"impostor", impostor.size()}};
}

std::vector<double> pair_distances(const Tensor& embeddings, std::span<const AttackPair> pairs) {
  std::vector<double> d;
  d.reserve(pairs.size());
  const std::size_t w = embeddings.cols();
  const auto data = embeddings.data();
  for (const auto& p : pairs) {
    d.push_back(embedding_distance(data.subspan(p.source * w, w), data.subspan(p.target * w, w)));
  }
  return d;
}

double victim_threshold(const Victim& victim, const IdentityDataset& eval, double far) {
  const auto protocol = VerificationProtocol::all_pairs(eval);
  return far_threshold(pair_distances(victim.embed(eval.samples), protocol.impostor), far);
}

ASRReport asr(std::span<const Tensor> adversarial, std::span<const Tensor> targets, const Victim& victim,
              double threshold) {
  if (adversarial.size() != targets.size()) throw DimensionError("asr: one target per adversarial example");
  std::vector<double> d;
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    if (adversarial[i].shape() != targets[i].shape()) throw DimensionError("asr: adversarial/target shape mismatch");
    const Tensor a = victim.embed(adversarial[i]);
    const Tensor t = victim.embed(targets[i]);
    d.push_back(embedding_distance(a.data(), t.data()));
  }
  return asr_from_distances(d, threshold, victim.id);
}

}  // namespace dpa
