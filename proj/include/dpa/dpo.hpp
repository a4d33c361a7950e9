#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpa/container.hpp"
#include "dpa/data.hpp"
#include "dpa/errors.hpp"
#include "dpa/model.hpp"
#include "dpa/tape.hpp"

namespace dpa {

struct TrainConfig {
  double learning_rate = 0.1;
  int epochs = 35;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

/// Which initialization a trajectory started from.
enum class Trajectory : char {
  kPretrained = 'P',
  kRandom = 'A',
};

char tag_char(Trajectory t);
Trajectory parse_trajectory(char c);

struct Checkpoint {
  Trajectory tag = Trajectory::kPretrained;
  std::uint32_t epoch = 0;
  BackboneParams backbone;
  HeadParams head;
};

class IncompleteStoreError : public std::runtime_error {
 public:
  IncompleteStoreError(Trajectory tag, std::uint32_t epoch);
  Trajectory tag() const { return tag_; }
  std::uint32_t epoch() const { return epoch_; }

 private:
  Trajectory tag_;
  std::uint32_t epoch_;
};

class DivergedTrainingError : public NumericError {
 public:
  DivergedTrainingError(int epoch, std::size_t batch, const std::string& detail);
  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

/// Backbone snapshots keyed by (trajectory, epoch). Checkpoints are kept
/// sorted P-ascending then A-ascending.
class CheckpointStore {
 public:
  void add(Checkpoint checkpoint);
  const Checkpoint* find(Trajectory tag, std::uint32_t epoch) const;
  const Checkpoint& at(Trajectory tag, std::uint32_t epoch) const;
  const std::vector<Checkpoint>& checkpoints() const { return checkpoints_; }
  std::size_t count(Trajectory tag) const;
  std::optional<std::uint32_t> last_epoch(Trajectory tag) const;

  std::string dataset_fingerprint;
  TrainConfig config;

  /// Directory of `<tag>_<epoch>.dpac` files plus `manifest.json` listing
  /// (tag, epoch, file, sha256).
  void save(const std::filesystem::path& dir) const;
  static CheckpointStore load(const std::filesystem::path& dir);

 private:
  std::vector<Checkpoint> checkpoints_;
};

TensorFile checkpoint_file(const Checkpoint& c);
Checkpoint checkpoint_from_file(const TensorFile& f);

/// A trainable tensor and the tape node it was bound to.
struct ParamSlot {
  Tensor* tensor = nullptr;
  Var var;
};

/// Plain SGD: p -= lr * grad for every slot.
void sgd_step(std::span<const ParamSlot> slots, const GradientMap& grads, double learning_rate);

struct TrajectoryResult {
  std::vector<Checkpoint> checkpoints;  // epochs 1..c
  std::vector<double> epoch_losses;     // mean minibatch loss per epoch
  HeadParams final_head;
};

/// Minibatch SGD on the margin loss for config.epochs epochs, snapshotting
/// after each epoch. Batch order is a shuffle keyed by (seed, epoch).
TrajectoryResult train_trajectory(BackboneParams backbone, HeadParams head, const IdentityDataset& data,
                                  const TrainConfig& config, Trajectory tag, const MarginSpec& margin);

struct DpoSeeds {
  std::uint64_t head_pretrained = 1;
  std::uint64_t backbone_random = 2;
  std::uint64_t head_random = 3;
};

struct DpoResult {
  CheckpointStore store;
  std::vector<double> losses_pretrained;
  std::vector<double> losses_random;
};

/// Trains the pretrained-init and random-init trajectories. The store also
/// holds the supplied pretrained backbone as the epoch-0 P checkpoint.
DpoResult run_dpo(const BackboneParams& pretrained, const BackboneSpec& spec, const IdentityDataset& data,
                  const TrainConfig& config, const MarginSpec& margin, const DpoSeeds& seeds, bool parallel = false);

/// Stand-in for a public pretrained backbone: a random-init backbone
/// trained on a dataset with its own identities.
BackboneParams bootstrap_pretrained(const BackboneSpec& spec, const IdentityDataset& disjoint, const TrainConfig& config,
                                    const MarginSpec& margin, std::uint64_t seed);

/// floor(sqrt(c)).
int kappa(int c);

/// Epochs picked from one trajectory: {0 (P only)} + {j in [1, c] : j mod kappa = 1} + {c}.
std::vector<std::uint32_t> selected_epochs(int c, Trajectory tag);

struct SurrogateModel {
  Trajectory tag = Trajectory::kPretrained;
  std::uint32_t epoch = 0;
  BackboneParams params;
};

/// Diversified surrogate set: P epochs ascending, then A epochs ascending.
std::vector<SurrogateModel> select_checkpoints(const CheckpointStore& store, int c);
/// P trajectory only.
std::vector<SurrogateModel> select_single(const CheckpointStore& store, int c);
/// {v0 (P), vc (P), vc (A)}.
std::vector<SurrogateModel> select_endpoints(const CheckpointStore& store, int c);

std::string describe(std::span<const SurrogateModel> models);

}  // namespace dpa
