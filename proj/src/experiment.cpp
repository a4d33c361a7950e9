#include "dpa/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dpa/container.hpp"
#include "dpa/errors.hpp"
#include "dpa/parallel.hpp"
#include "dpa/rng.hpp"

namespace dpa {

namespace {

// Stream tags for derive_seed; each names one independent random source.
enum Stream : std::uint64_t {
  kIdentities = 0x1D,
  kSplit = 0x5B,
  kPretrainData = 0x9D,
  kPretrainInit = 0x91,
  kPretrainShuffle = 0x95,
  kVictimData = 0x7D,
  kVictimSplit = 0x75,
  kVictimInit = 0x71,
  kVictimShuffle = 0x77,
  kPairs = 0xA1,
  kDpoShuffle = 0xD5,
  kDpoHeadP = 0xD1,
  kDpoBackboneA = 0xD2,
  kDpoHeadA = 0xD3,
};

std::string cache_key(std::span<const SurrogateModel> models, double eta) {
  std::ostringstream os;
  os.precision(17);
  os << describe(models) << "|" << eta;
  return os.str();
}

}  // namespace

AttackMode parse_mode(const std::string& s) {
  if (s == "vanilla") return AttackMode::kVanilla;
  if (s == "dpo") return AttackMode::kDpo;
  if (s == "dpo+hma") return AttackMode::kDpoHma;
  if (s == "dma") return AttackMode::kDma;
  if (s == "fm") return AttackMode::kFm;
  throw ValueError("unknown mode '" + s + "' (expected vanilla|dpo|dpo+hma|dma|fm)");
}

std::string to_string(AttackMode m) {
  switch (m) {
    case AttackMode::kVanilla: return "vanilla";
    case AttackMode::kDpo: return "dpo";
    case AttackMode::kDpoHma: return "dpo+hma";
    case AttackMode::kDma: return "dma";
    case AttackMode::kFm: return "fm";
  }
  return "?";
}

World make_world(const RunConfig& config, std::uint64_t seed) {
  config.validate();
  World w;
  w.seed = seed;
  const auto& d = config.data;
  const std::size_t dim = config.backbone.input_dim;
  w.identities = generate(derive_seed(seed, kIdentities), d.classes, d.per_class, dim, d.sigma);
  w.surrogate = split(w.identities, d.train_fraction, derive_seed(seed, kSplit));
  w.pretrain_data =
      generate(derive_seed(seed, kPretrainData), config.pretrain.identities, config.pretrain.per_class, dim, d.sigma);
  w.victim_data = resample(w.identities, derive_seed(seed, kVictimData), config.victim.per_class);
  w.victim_split = split(w.victim_data, d.train_fraction, derive_seed(seed, kVictimSplit));
  w.pairs = sample_attack_pairs(w.surrogate.eval, config.eval.pairs, derive_seed(seed, kPairs));
  return w;
}

BackboneParams pretrained_backbone(const RunConfig& config, const World& world) {
  if (!config.pretrain.path.empty()) {
    const Checkpoint c = checkpoint_from_file(read_dpac(config.pretrain.path));
    if (!c.backbone.matches(config.backbone)) {
      throw DimensionError("pretrained checkpoint " + config.pretrain.path.string() + " does not match [model]");
    }
    return c.backbone;
  }
  TrainConfig tc = config.train;
  tc.epochs = config.pretrain.epochs;
  tc.seed = derive_seed(world.seed, kPretrainShuffle);
  return bootstrap_pretrained(config.backbone, world.pretrain_data, tc, config.margin,
                              derive_seed(world.seed, kPretrainInit));
}

DpoResult train_surrogates(const RunConfig& config, const World& world, const BackboneParams& pretrained, int epochs) {
  TrainConfig tc = config.train;
  tc.epochs = epochs;
  tc.seed = derive_seed(world.seed, kDpoShuffle);
  const DpoSeeds seeds{derive_seed(world.seed, kDpoHeadP), derive_seed(world.seed, kDpoBackboneA),
                       derive_seed(world.seed, kDpoHeadA)};
  return run_dpo(pretrained, config.backbone, world.surrogate.train, tc, config.margin, seeds);
}

TrajectoryResult train_victim(const RunConfig& config, const World& world) {
  TrainConfig tc = config.train;
  tc.epochs = config.victim.epochs;
  tc.seed = derive_seed(world.seed, kVictimShuffle);
  const std::uint64_t init = derive_seed(world.seed, kVictimInit);
  return train_trajectory(init_backbone(config.backbone, init),
                          init_head(world.victim_data.classes, config.backbone.embedding_dim, derive_seed(init, 1)),
                          world.victim_split.train, tc, Trajectory::kRandom, config.margin);
}

std::vector<SurrogateModel> models_for(AttackMode mode, const CheckpointStore& store, int c) {
  switch (mode) {
    case AttackMode::kVanilla:
      return {SurrogateModel{Trajectory::kPretrained, static_cast<std::uint32_t>(c),
                             store.at(Trajectory::kPretrained, static_cast<std::uint32_t>(c)).backbone}};
    case AttackMode::kDpo:
    case AttackMode::kDpoHma:
    case AttackMode::kDma:
      return select_checkpoints(store, c);
    case AttackMode::kFm:
      return select_endpoints(store, c);
  }
  throw ValueError("models_for: unknown mode");
}

double eta_for(AttackMode mode, const AttackConfig& attack) {
  return mode == AttackMode::kDpoHma ? attack.eta : 0.0;
}

std::vector<BackboneParams> params_of(std::span<const SurrogateModel> models) {
  std::vector<BackboneParams> out;
  out.reserve(models.size());
  for (const auto& m : models) out.push_back(m.params);
  return out;
}

std::string models_digest(std::span<const SurrogateModel> models) {
  std::string bytes;
  for (const auto& m : models) {
    bytes += encode_dpac(checkpoint_file(Checkpoint{m.tag, m.epoch, m.params, HeadParams{}}));
  }
  return sha256_hex(bytes);
}

SeedExperiment::SeedExperiment(const RunConfig& config, std::uint64_t seed, int epochs)
    : config_(config), world_(make_world(config, seed)) {
  store_ = train_surrogates(config_, world_, pretrained_backbone(config_, world_), epochs).store;
  victim_ = Victim{"victim-" + std::to_string(seed), {train_victim(config_, world_).checkpoints.back().backbone}};
  victim_threshold_ = dpa::victim_threshold(victim_, world_.victim_split.eval, config_.eval.far);
  for (const auto& p : world_.pairs.pairs) {
    sources_.push_back(world_.surrogate.eval.sample(p.source));
    targets_.push_back(world_.surrogate.eval.sample(p.target));
  }
}

std::vector<AttackTrace> SeedExperiment::traces(std::span<const SurrogateModel> models, double eta) const {
  AttackConfig ac = config_.attack;
  ac.eta = eta;
  const std::vector<BackboneParams> params = params_of(models);
  std::vector<AttackTrace> out(sources_.size());
  parallel_for(sources_.size(), [&](std::size_t i) { out[i] = craft(sources_[i], targets_[i], params, ac); });
  return out;
}

const std::vector<Tensor>& SeedExperiment::adversarials(std::span<const SurrogateModel> models, double eta) {
  const std::string key = cache_key(models, eta);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  std::vector<Tensor> adv;
  for (auto& t : traces(models, eta)) {
    if (!t.completed) throw NumericError("attack aborted: " + t.error);
    adv.push_back(std::move(t.adversarial));
  }
  return cache_.emplace(key, std::move(adv)).first->second;
}

ASRReport SeedExperiment::black_box(std::span<const SurrogateModel> models, double eta) {
  return asr(adversarials(models, eta), targets_, victim_, victim_threshold_);
}

ASRReport SeedExperiment::white_box(std::span<const SurrogateModel> models, double eta) {
  const Victim surrogate{"surrogate:" + describe(models), params_of(models)};
  const double t = dpa::victim_threshold(surrogate, world_.surrogate.eval, config_.eval.far);
  return asr(adversarials(models, eta), targets_, surrogate, t);
}

int required_epochs(const RunConfig& config) {
  int e = config.train.epochs;
  for (int c : config.eval.c_grid) e = std::max(e, c);
  return e;
}

std::vector<std::unique_ptr<SeedExperiment>> build_experiments(const RunConfig& config, int epochs) {
  std::vector<std::unique_ptr<SeedExperiment>> runs(config.eval.seeds.size());
  parallel_for(runs.size(),
               [&](std::size_t i) { runs[i] = std::make_unique<SeedExperiment>(config, config.eval.seeds[i], epochs); });
  return runs;
}

Stat Stat::of(std::vector<double> values) {
  Stat s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  double sum = 0.0;
  for (double v : s.values) sum += v;
  s.mean = sum / static_cast<double>(s.values.size());
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

nlohmann::json Stat::to_json() const { return {{"values", values}, {"mean", mean}, {"stddev", stddev}}; }

const AblationRow& AblationReport::row(const std::string& mode) const {
  for (const auto& r : rows) {
    if (r.mode == mode) return r;
  }
  throw ValueError("ablation report has no row '" + mode + "'");
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"mode", r.mode},
                         {"models", r.models},
                         {"black_box_asr", r.black_box.to_json()},
                         {"white_box_asr", r.white_box.to_json()}});
  }
  return {{"seeds", seeds},
          {"victim_thresholds", victim_thresholds},
          {"checkpoint_digests", checkpoint_digests},
          {"rows", rows_json}};
}

AblationReport run_ablation(const RunConfig& config, std::span<const std::unique_ptr<SeedExperiment>> runs) {
  const int c = config.train.epochs;
  AblationReport report;
  for (const auto& run : runs) {
    report.seeds.push_back(run->world().seed);
    report.victim_thresholds.push_back(run->victim_threshold());
    report.checkpoint_digests.push_back(models_digest(models_for(AttackMode::kDpo, run->store(), c)));
  }
  for (AttackMode mode : {AttackMode::kVanilla, AttackMode::kDpo, AttackMode::kDpoHma, AttackMode::kFm}) {
    AblationRow row;
    row.mode = to_string(mode);
    std::vector<double> bb, wb;
    for (const auto& run : runs) {
      const auto models = models_for(mode, run->store(), c);
      row.models = models.size();
      const double eta = eta_for(mode, config.attack);
      bb.push_back(run->black_box(models, eta).asr);
      wb.push_back(run->white_box(models, eta).asr);
    }
    row.black_box = Stat::of(std::move(bb));
    row.white_box = Stat::of(std::move(wb));
    report.rows.push_back(std::move(row));
  }
  return report;
}

AblationReport run_ablation(const RunConfig& config) {
  const auto runs = build_experiments(config, config.train.epochs);
  return run_ablation(config, runs);
}

SweepParam parse_sweep_param(const std::string& s) {
  if (s == "c") return SweepParam::kC;
  if (s == "eta") return SweepParam::kEta;
  throw ValueError("unknown sweep parameter '" + s + "' (expected c|eta)");
}

const SweepRow& SweepReport::row(double value, const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.value == value && r.variant == variant) return r;
  }
  throw ValueError("sweep report has no row for " + variant);
}

nlohmann::json SweepReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back(
        {{"value", r.value}, {"variant", r.variant}, {"models", r.models}, {"black_box_asr", r.black_box.to_json()}});
  }
  return {{"param", param == SweepParam::kC ? "c" : "eta"}, {"seeds", seeds}, {"rows", rows_json}};
}

SweepReport run_sweep(const RunConfig& config, SweepParam param, std::span<const std::unique_ptr<SeedExperiment>> runs) {
  SweepReport report;
  report.param = param;
  for (const auto& run : runs) report.seeds.push_back(run->world().seed);

  auto add_row = [&](double value, const std::string& variant, auto&& pick, double eta) {
    SweepRow row;
    row.value = value;
    row.variant = variant;
    std::vector<double> bb;
    for (const auto& run : runs) {
      const std::vector<SurrogateModel> models = pick(*run);
      row.models = models.size();
      bb.push_back(run->black_box(models, eta).asr);
    }
    row.black_box = Stat::of(std::move(bb));
    report.rows.push_back(std::move(row));
  };

  if (param == SweepParam::kC) {
    for (int c : config.eval.c_grid) {
      add_row(c, "single", [c](SeedExperiment& r) { return select_single(r.store(), c); }, config.attack.eta);
      add_row(c, "diverse", [c](SeedExperiment& r) { return select_checkpoints(r.store(), c); }, config.attack.eta);
    }
  } else {
    const int c = config.train.epochs;
    for (double eta : config.eval.eta_grid) {
      add_row(eta, eta == 0.0 ? "dma" : "hma", [c](SeedExperiment& r) { return select_checkpoints(r.store(), c); }, eta);
    }
  }
  return report;
}

SweepReport run_sweep(const RunConfig& config, SweepParam param) {
  const auto runs = build_experiments(config, required_epochs(config));
  return run_sweep(config, param, runs);
}

}  // namespace dpa
