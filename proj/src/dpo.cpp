#include "dpa/dpo.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "dpa/container.hpp"
#include "dpa/rng.hpp"

namespace dpa {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValueError("train: learning_rate must be positive");
  if (epochs < 1) throw ValueError("train: epochs must be >= 1");
  if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
}

char tag_char(Trajectory t) { return static_cast<char>(t); }

Trajectory parse_trajectory(char c) {
  if (c == 'P') return Trajectory::kPretrained;
  if (c == 'A') return Trajectory::kRandom;
  throw FormatError(std::string("unknown trajectory tag '") + c + "'");
}

IncompleteStoreError::IncompleteStoreError(Trajectory tag, std::uint32_t epoch)
    : std::runtime_error(std::string("checkpoint store is missing (") + tag_char(tag) + ", epoch " +
                         std::to_string(epoch) + ")"),
      tag_(tag),
      epoch_(epoch) {}

DivergedTrainingError::DivergedTrainingError(int epoch, std::size_t batch, const std::string& detail)
    : NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " +
                   detail),
      epoch_(epoch),
      batch_(batch) {}

namespace {

bool checkpoint_order(const Checkpoint& a, const Checkpoint& b) {
  // P before A, then by epoch.
  if (a.tag != b.tag) return a.tag == Trajectory::kPretrained;
  return a.epoch < b.epoch;
}

std::string checkpoint_filename(Trajectory tag, std::uint32_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c_%04u.dpac", tag_char(tag), epoch);
  return buf;
}

nlohmann::json config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"shuffle", c.shuffle}};
}

}  // namespace

void CheckpointStore::add(Checkpoint checkpoint) {
  if (checkpoint.tag == Trajectory::kRandom && checkpoint.epoch == 0) {
    throw ValueError("random-init trajectory has no epoch-0 checkpoint");
  }
  if (find(checkpoint.tag, checkpoint.epoch)) {
    throw ValueError(std::string("duplicate checkpoint (") + tag_char(checkpoint.tag) + ", " +
                     std::to_string(checkpoint.epoch) + ")");
  }
  auto pos = std::upper_bound(checkpoints_.begin(), checkpoints_.end(), checkpoint, checkpoint_order);
  checkpoints_.insert(pos, std::move(checkpoint));
}

const Checkpoint* CheckpointStore::find(Trajectory tag, std::uint32_t epoch) const {
  for (const auto& c : checkpoints_) {
    if (c.tag == tag && c.epoch == epoch) return &c;
  }
  return nullptr;
}

const Checkpoint& CheckpointStore::at(Trajectory tag, std::uint32_t epoch) const {
  if (const auto* c = find(tag, epoch)) return *c;
  throw IncompleteStoreError(tag, epoch);
}

std::size_t CheckpointStore::count(Trajectory tag) const {
  return static_cast<std::size_t>(
      std::count_if(checkpoints_.begin(), checkpoints_.end(), [&](const Checkpoint& c) { return c.tag == tag; }));
}

std::optional<std::uint32_t> CheckpointStore::last_epoch(Trajectory tag) const {
  std::optional<std::uint32_t> last;
  for (const auto& c : checkpoints_) {
    if (c.tag == tag) last = std::max(last.value_or(0), c.epoch);
  }
  return last;
}

TensorFile checkpoint_file(const Checkpoint& c) {
  TensorFile f;
  f.tag = tag_char(c.tag);
  f.epoch = c.epoch;
  for (std::size_t i = 0; i < c.backbone.weights.size(); ++i) {
    const std::string layer = "layer" + std::to_string(i + 1);
    f.tensors.push_back({layer + ".weight", c.backbone.weights[i]});
    f.tensors.push_back({layer + ".bias", c.backbone.biases[i]});
  }
  if (!c.head.weight.empty()) f.tensors.push_back({"head.weight", c.head.weight});
  return f;
}

Checkpoint checkpoint_from_file(const TensorFile& f) {
  Checkpoint c;
  c.tag = parse_trajectory(f.tag);
  c.epoch = f.epoch;
  for (std::size_t i = 1;; ++i) {
    const std::string layer = "layer" + std::to_string(i);
    auto it = std::find_if(f.tensors.begin(), f.tensors.end(),
                           [&](const NamedTensor& nt) { return nt.name == layer + ".weight"; });
    if (it == f.tensors.end()) break;
    c.backbone.weights.push_back(it->tensor);
    c.backbone.biases.push_back(f.get(layer + ".bias"));
  }
  if (c.backbone.weights.empty()) throw FormatError("checkpoint has no backbone layers");
  for (const auto& nt : f.tensors) {
    if (nt.name == "head.weight") c.head.weight = nt.tensor;
  }
  return c;
}

void CheckpointStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& c : checkpoints_) {
    const std::string name = checkpoint_filename(c.tag, c.epoch);
    const std::string bytes = encode_dpac(checkpoint_file(c));
    write_file(dir / name, bytes);
    entries.push_back({{"tag", std::string(1, tag_char(c.tag))},
                       {"epoch", c.epoch},
                       {"file", name},
                       {"sha256", sha256_hex(bytes)}});
  }
  nlohmann::json manifest = {{"format", "dpac-store"},
                             {"version", TensorFile::kVersion},
                             {"dataset_fingerprint", dataset_fingerprint},
                             {"train", config_json(config)},
                             {"checkpoints", std::move(entries)}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointStore CheckpointStore::load(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != "dpac-store") throw FormatError("not a checkpoint store: " + dir.string());
  CheckpointStore store;
  store.dataset_fingerprint = manifest.at("dataset_fingerprint").get<std::string>();
  const auto& t = manifest.at("train");
  store.config.learning_rate = t.at("learning_rate").get<double>();
  store.config.epochs = t.at("epochs").get<int>();
  store.config.batch_size = t.at("batch_size").get<std::size_t>();
  store.config.seed = t.at("seed").get<std::uint64_t>();
  store.config.shuffle = t.at("shuffle").get<bool>();
  for (const auto& e : manifest.at("checkpoints")) {
    const auto file = dir / e.at("file").get<std::string>();
    const std::string bytes = read_file(file);
    if (sha256_hex(bytes) != e.at("sha256").get<std::string>()) throw FormatError("hash mismatch: " + file.string());
    Checkpoint c = checkpoint_from_file(decode_dpac(bytes));
    if (std::string(1, tag_char(c.tag)) != e.at("tag").get<std::string>() ||
        c.epoch != e.at("epoch").get<std::uint32_t>()) {
      throw FormatError("manifest entry does not match file header: " + file.string());
    }
    store.add(std::move(c));
  }
  return store;
}

void sgd_step(std::span<const ParamSlot> slots, const GradientMap& grads, double learning_rate) {
  for (const auto& slot : slots) {
    if (!grads.contains(slot.var)) {
      throw ValueError("sgd_step: no gradient for trainable node " + std::to_string(slot.var.id));
    }
  }
  for (const auto& slot : slots) {
    const Tensor& g = grads.at(slot.var);
    if (g.shape() != slot.tensor->shape()) throw DimensionError("sgd_step: gradient shape mismatch");
    auto p = slot.tensor->data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  }
}

TrajectoryResult train_trajectory(BackboneParams backbone, HeadParams head, const IdentityDataset& data,
                                  const TrainConfig& config, Trajectory tag, const MarginSpec& margin) {
  config.validate();
  margin.validate();
  if (data.size() == 0) throw ValueError("train_trajectory: empty dataset");
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= head.weight.rows()) {
      throw ValueError("train_trajectory: label " + std::to_string(y) + " exceeds head class count");
    }
  }

  TrajectoryResult result;
  const std::size_t n = data.size();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    if (config.shuffle) {
      order = shuffled_indices(n, derive_seed(config.seed, 0x5F1E, static_cast<std::uint64_t>(epoch)));
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
    }
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);
      try {
        Tape tape;
        const BoundBackbone bound = bind_trainable(tape, backbone);
        const Var w = tape.leaf(head.weight);
        const Var x = tape.constant(data.batch(idx));
        const Var loss = arcface_loss(tape, bound, w, x, labels, margin);
        std::vector<ParamSlot> slots;
        for (std::size_t l = 0; l < backbone.weights.size(); ++l) {
          slots.push_back({&backbone.weights[l], bound.weights[l]});
          slots.push_back({&backbone.biases[l], bound.biases[l]});
        }
        slots.push_back({&head.weight, w});
        std::vector<Var> vars;
        for (const auto& s : slots) vars.push_back(s.var);
        const GradientMap grads = tape.backward(loss, vars);
        sgd_step(slots, grads, config.learning_rate);
        loss_sum += tape.value(loss).item() * static_cast<double>(idx.size());
      } catch (const NumericError& e) {
        throw DivergedTrainingError(epoch, batch_index, e.what());
      }
    }
    for (const auto& w : backbone.weights) {
      if (!w.all_finite()) throw DivergedTrainingError(epoch, batch_index, "non-finite weights");
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(n));
    result.checkpoints.push_back(Checkpoint{tag, static_cast<std::uint32_t>(epoch), backbone, head});
  }
  result.final_head = std::move(head);
  return result;
}

DpoResult run_dpo(const BackboneParams& pretrained, const BackboneSpec& spec, const IdentityDataset& data,
                  const TrainConfig& config, const MarginSpec& margin, const DpoSeeds& seeds, bool parallel) {
  spec.validate();
  if (!pretrained.matches(spec)) throw DimensionError("run_dpo: pretrained parameters do not match backbone spec");
  const HeadParams head_p = init_head(data.classes, spec.embedding_dim, seeds.head_pretrained);
  const BackboneParams backbone_a = init_backbone(spec, seeds.backbone_random);
  const HeadParams head_a = init_head(data.classes, spec.embedding_dim, seeds.head_random);

  TrajectoryResult traj_p, traj_a;
  if (parallel) {
    std::exception_ptr err;
    std::thread worker([&] {
      try {
        traj_a = train_trajectory(backbone_a, head_a, data, config, Trajectory::kRandom, margin);
      } catch (...) {
        err = std::current_exception();
      }
    });
    try {
      traj_p = train_trajectory(pretrained, head_p, data, config, Trajectory::kPretrained, margin);
    } catch (...) {
      worker.join();
      throw;
    }
    worker.join();
    if (err) std::rethrow_exception(err);
  } else {
    traj_p = train_trajectory(pretrained, head_p, data, config, Trajectory::kPretrained, margin);
    traj_a = train_trajectory(backbone_a, head_a, data, config, Trajectory::kRandom, margin);
  }

  DpoResult result;
  result.store.config = config;
  result.store.dataset_fingerprint = data.fingerprint();
  result.store.add(Checkpoint{Trajectory::kPretrained, 0, pretrained, head_p});
  for (auto& c : traj_p.checkpoints) result.store.add(std::move(c));
  for (auto& c : traj_a.checkpoints) result.store.add(std::move(c));
  result.losses_pretrained = std::move(traj_p.epoch_losses);
  result.losses_random = std::move(traj_a.epoch_losses);
  return result;
}

BackboneParams bootstrap_pretrained(const BackboneSpec& spec, const IdentityDataset& disjoint, const TrainConfig& config,
                                    const MarginSpec& margin, std::uint64_t seed) {
  BackboneParams init = init_backbone(spec, derive_seed(seed, 0xB00));
  HeadParams head = init_head(disjoint.classes, spec.embedding_dim, derive_seed(seed, 0xB01));
  auto result = train_trajectory(std::move(init), std::move(head), disjoint, config, Trajectory::kPretrained, margin);
  return std::move(result.checkpoints.back().backbone);
}

int kappa(int c) {
  if (c < 1) throw ValueError("kappa: c must be >= 1");
  int k = 1;
  while ((k + 1) * (k + 1) <= c) ++k;
  return k;
}

std::vector<std::uint32_t> selected_epochs(int c, Trajectory tag) {
  const int k = kappa(c);
  std::vector<std::uint32_t> epochs;
  if (tag == Trajectory::kPretrained) epochs.push_back(0);
  for (int j = 1; j <= c; ++j) {
    // j congruent to 1 modulo kappa; for kappa = 1 that is every epoch.
    if (j % k == 1 % k) epochs.push_back(static_cast<std::uint32_t>(j));
  }
  if (epochs.empty() || epochs.back() != static_cast<std::uint32_t>(c)) epochs.push_back(static_cast<std::uint32_t>(c));
  return epochs;
}

namespace {

void append(std::vector<SurrogateModel>& out, const CheckpointStore& store, Trajectory tag,
            std::span<const std::uint32_t> epochs) {
  for (auto e : epochs) out.push_back(SurrogateModel{tag, e, store.at(tag, e).backbone});
}

}  // namespace

std::vector<SurrogateModel> select_checkpoints(const CheckpointStore& store, int c) {
  std::vector<SurrogateModel> out;
  append(out, store, Trajectory::kPretrained, selected_epochs(c, Trajectory::kPretrained));
  append(out, store, Trajectory::kRandom, selected_epochs(c, Trajectory::kRandom));
  return out;
}

std::vector<SurrogateModel> select_single(const CheckpointStore& store, int c) {
  std::vector<SurrogateModel> out;
  append(out, store, Trajectory::kPretrained, selected_epochs(c, Trajectory::kPretrained));
  return out;
}

std::vector<SurrogateModel> select_endpoints(const CheckpointStore& store, int c) {
  if (c < 1) throw ValueError("select_endpoints: c must be >= 1");
  const auto last = static_cast<std::uint32_t>(c);
  std::vector<SurrogateModel> out;
  const std::uint32_t p_epochs[] = {0, last};
  const std::uint32_t a_epochs[] = {last};
  append(out, store, Trajectory::kPretrained, p_epochs);
  append(out, store, Trajectory::kRandom, a_epochs);
  return out;
}

std::string describe(std::span<const SurrogateModel> models) {
  std::string s;
  for (const auto& m : models) {
    if (!s.empty()) s += ',';
    s += tag_char(m.tag);
    s += std::to_string(m.epoch);
  }
  return s;
}

}  // namespace dpa
