#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpa/config.hpp"
#include "dpa/data.hpp"
#include "dpa/dpo.hpp"
#include "dpa/evaluator.hpp"
#include "dpa/hma.hpp"

namespace dpa {

enum class AttackMode { kVanilla, kDpo, kDpoHma, kDma, kFm };

AttackMode parse_mode(const std::string& s);
std::string to_string(AttackMode m);

/// Every dataset derived from one experiment seed. Surrogates train on
/// `surrogate.train`; attack pairs index `surrogate.eval`; the victim sees a
/// fresh draw of the same identities; the pretrained backbone sees disjoint
/// identities.
struct World {
  std::uint64_t seed = 0;
  IdentityDataset identities;
  DataSplit surrogate;
  IdentityDataset pretrain_data;
  IdentityDataset victim_data;
  DataSplit victim_split;
  PairSet pairs;
};

World make_world(const RunConfig& config, std::uint64_t seed);

/// Loaded from `config.pretrain.path` when set, otherwise bootstrapped on
/// the world's disjoint identities.
BackboneParams pretrained_backbone(const RunConfig& config, const World& world);

DpoResult train_surrogates(const RunConfig& config, const World& world, const BackboneParams& pretrained, int epochs);

/// Random-init A trajectory on the victim draw with its own seeds.
TrajectoryResult train_victim(const RunConfig& config, const World& world);

std::vector<SurrogateModel> models_for(AttackMode mode, const CheckpointStore& store, int c);
double eta_for(AttackMode mode, const AttackConfig& attack);
std::vector<BackboneParams> params_of(std::span<const SurrogateModel> models);

/// SHA-256 over the DPAC encodings of the listed models.
std::string models_digest(std::span<const SurrogateModel> models);

/// One seed's trained surrogates and victim, with adversarial examples
/// cached by (model set, eta). Safe to query from one thread at a time.
class SeedExperiment {
 public:
  SeedExperiment(const RunConfig& config, std::uint64_t seed, int epochs);

  const World& world() const { return world_; }
  const CheckpointStore& store() const { return store_; }
  const Victim& victim() const { return victim_; }
  double victim_threshold() const { return victim_threshold_; }

  const std::vector<Tensor>& targets() const { return targets_; }
  const std::vector<Tensor>& adversarials(std::span<const SurrogateModel> models, double eta);
  std::vector<AttackTrace> traces(std::span<const SurrogateModel> models, double eta) const;

  ASRReport black_box(std::span<const SurrogateModel> models, double eta);
  /// The surrogate ensemble itself as the verifier, thresholded on the
  /// surrogate eval split.
  ASRReport white_box(std::span<const SurrogateModel> models, double eta);

 private:
  RunConfig config_;
  World world_;
  CheckpointStore store_;
  Victim victim_;
  double victim_threshold_ = 0.0;
  std::vector<Tensor> sources_;
  std::vector<Tensor> targets_;
  std::map<std::string, std::vector<Tensor>> cache_;
};

std::vector<std::unique_ptr<SeedExperiment>> build_experiments(const RunConfig& config, int epochs);

struct Stat {
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for one value

  static Stat of(std::vector<double> values);
  nlohmann::json to_json() const;
};

struct AblationRow {
  std::string mode;
  std::size_t models = 0;
  Stat black_box;
  Stat white_box;
};

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> victim_thresholds;
  std::vector<std::string> checkpoint_digests;
  std::vector<AblationRow> rows;  // vanilla, dpo, dpo+hma, fm

  const AblationRow& row(const std::string& mode) const;
  nlohmann::json to_json() const;
};

AblationReport run_ablation(const RunConfig& config, std::span<const std::unique_ptr<SeedExperiment>> runs);
AblationReport run_ablation(const RunConfig& config);

enum class SweepParam { kC, kEta };
SweepParam parse_sweep_param(const std::string& s);

struct SweepRow {
  double value = 0.0;
  std::string variant;  // "single" | "diverse" for c; "hma" | "dma" for eta
  std::size_t models = 0;
  Stat black_box;
};

struct SweepReport {
  SweepParam param = SweepParam::kC;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepRow> rows;

  const SweepRow& row(double value, const std::string& variant) const;
  nlohmann::json to_json() const;
};

SweepReport run_sweep(const RunConfig& config, SweepParam param, std::span<const std::unique_ptr<SeedExperiment>> runs);
SweepReport run_sweep(const RunConfig& config, SweepParam param);

/// Epochs the surrogate trajectories need to cover both `train.epochs` and
/// every c-grid point.
int required_epochs(const RunConfig& config);

}  // namespace dpa
