#include "dpa/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "dpa/container.hpp"
#include "dpa/errors.hpp"
#include "dpa/rng.hpp"

namespace dpa {

namespace {

TensorFile to_file(const IdentityDataset& d) {
  Tensor labels(Shape{d.labels.size()});
  for (std::size_t i = 0; i < d.labels.size(); ++i) labels[i] = d.labels[i];
  TensorFile f;
  f.tag = 'D';
  f.tensors = {{"prototypes", d.prototypes}, {"samples", d.samples}, {"labels", std::move(labels)}};
  return f;
}

void draw_samples(IdentityDataset& d, std::size_t per_class, Rng& rng) {
  const std::size_t dim = d.input_dim;
  d.samples = Tensor(Shape{d.classes * per_class, dim});
  d.labels.clear();
  for (std::size_t k = 0; k < d.classes; ++k) {
    for (std::size_t n = 0; n < per_class; ++n) {
      const std::size_t row = k * per_class + n;
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = d.prototypes[k * dim + j] + d.sigma * rng.normal();
        d.samples[row * dim + j] = std::clamp(v, 0.0, 255.0);
      }
      d.labels.push_back(static_cast<int>(k));
    }
  }
}

}  // namespace

Tensor IdentityDataset::batch(std::span<const std::size_t> indices) const {
  Tensor out(Shape{indices.size(), input_dim});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw ValueError("dataset index out of range");
    std::copy_n(samples.data().begin() + static_cast<std::ptrdiff_t>(i * input_dim), input_dim,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * input_dim));
  }
  return out;
}

std::string IdentityDataset::fingerprint() const { return sha256_hex(encode_dpac(to_file(*this))); }

IdentityDataset generate(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t input_dim,
                         double sigma) {
  if (classes < 2) throw ValueError("generate: need at least 2 classes");
  if (per_class < 2) throw ValueError("generate: need at least 2 samples per class");
  if (input_dim == 0) throw ValueError("generate: input_dim must be positive");
  if (!(sigma >= 0.0)) throw ValueError("generate: sigma must be >= 0");
  IdentityDataset d;
  d.classes = classes;
  d.input_dim = input_dim;
  d.seed = seed;
  d.sigma = sigma;
  d.prototypes = Tensor(Shape{classes, input_dim});
  Rng proto_rng(derive_seed(seed, 0x9907));
  for (auto& v : d.prototypes.data()) v = proto_rng.uniform(0.0, 255.0);
  Rng noise_rng(derive_seed(seed, 0x5A3));
  draw_samples(d, per_class, noise_rng);
  return d;
}

IdentityDataset resample(const IdentityDataset& identities, std::uint64_t seed, std::size_t per_class) {
  if (per_class < 2) throw ValueError("resample: need at least 2 samples per class");
  IdentityDataset d;
  d.classes = identities.classes;
  d.input_dim = identities.input_dim;
  d.seed = seed;
  d.sigma = identities.sigma;
  d.prototypes = identities.prototypes;
  Rng noise_rng(derive_seed(seed, 0x5A3));
  draw_samples(d, per_class, noise_rng);
  return d;
}

IdentityDataset subset(const IdentityDataset& data, std::span<const std::size_t> indices) {
  IdentityDataset d;
  d.classes = data.classes;
  d.input_dim = data.input_dim;
  d.seed = data.seed;
  d.sigma = data.sigma;
  d.prototypes = data.prototypes;
  d.samples = data.batch(indices);
  for (auto i : indices) d.labels.push_back(data.labels[i]);
  return d;
}

DataSplit split(const IdentityDataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValueError("split: fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  DataSplit out;
  for (std::size_t k = 0; k < data.classes; ++k) {
    const auto& members = by_class[k];
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw ValueError("split: class " + std::to_string(k) + " has fewer than 2 samples and cannot be stratified");
    }
    const auto order = shuffled_indices(members.size(), derive_seed(seed, 0x5917, k));
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
    for (std::size_t r = 0; r < members.size(); ++r) {
      (r < n_train ? out.train_indices : out.eval_indices).push_back(members[order[r]]);
    }
  }
  std::sort(out.train_indices.begin(), out.train_indices.end());
  std::sort(out.eval_indices.begin(), out.eval_indices.end());
  out.train = subset(data, out.train_indices);
  out.eval = subset(data, out.eval_indices);
  return out;
}

PairSet sample_attack_pairs(const IdentityDataset& data, std::size_t count, std::uint64_t seed) {
  const std::set<int> present(data.labels.begin(), data.labels.end());
  if (present.size() < 2) throw ValueError("sample_attack_pairs: need samples from at least 2 identities");
  Rng rng(derive_seed(seed, 0xFA12));
  PairSet set;
  set.pairs.reserve(count);
  while (set.pairs.size() < count) {
    const std::size_t s = rng.below(data.size());
    std::size_t t = rng.below(data.size());
    while (data.labels[t] == data.labels[s]) t = rng.below(data.size());
    set.pairs.push_back({s, t});
  }
  return set;
}

void save_dataset(const std::filesystem::path& stem, const IdentityDataset& data) {
  auto dpac = stem;
  dpac += ".dpac";
  auto manifest = stem;
  manifest += ".json";
  const std::string bytes = encode_dpac(to_file(data));
  write_file(dpac, bytes);
  nlohmann::json j = {{"file", dpac.filename().string()},
                      {"sha256", sha256_hex(bytes)},
                      {"seed", data.seed},
                      {"sigma", data.sigma},
                      {"classes", data.classes},
                      {"input_dim", data.input_dim},
                      {"samples", data.size()}};
  write_file(manifest, j.dump(2) + "\n");
}

IdentityDataset load_dataset(const std::filesystem::path& stem) {
  auto manifest = stem;
  manifest += ".json";
  const auto j = nlohmann::json::parse(read_file(manifest));
  const auto dpac = stem.parent_path() / j.at("file").get<std::string>();
  const std::string bytes = read_file(dpac);
  if (sha256_hex(bytes) != j.at("sha256").get<std::string>()) throw FormatError("dataset hash mismatch: " + dpac.string());
  const TensorFile f = decode_dpac(bytes);
  IdentityDataset d;
  d.seed = j.at("seed").get<std::uint64_t>();
  d.sigma = j.at("sigma").get<double>();
  d.classes = j.at("classes").get<std::size_t>();
  d.input_dim = j.at("input_dim").get<std::size_t>();
  d.prototypes = f.get("prototypes");
  d.samples = f.get("samples");
  for (double v : f.get("labels").data()) d.labels.push_back(static_cast<int>(v));
  return d;
}

}  // namespace dpa
