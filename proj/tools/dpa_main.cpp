// dpa: train surrogate trajectories, craft attacks, evaluate ASR, run
// ablations, sweeps and gradient self-checks.
//
// Exit codes: 0 ok, 1 config error, 2 runtime/numeric error, 3 verification
// failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpa/config.hpp"
#include "dpa/container.hpp"
#include "dpa/dpo.hpp"
#include "dpa/evaluator.hpp"
#include "dpa/experiment.hpp"
#include "dpa/gradcheck.hpp"
#include "dpa/hma.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kVerificationFailure = 3;

class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

dpa::RunConfig load(const Common& c) {
  if (c.config.empty()) throw dpa::ConfigError("--config is required");
  dpa::RunConfig cfg = dpa::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void require_fresh(const fs::path& p) {
  if (p.empty()) throw dpa::ConfigError("--out is required");
  if (fs::exists(p)) throw dpa::ConfigError("output path already exists: " + p.string());
}

void write_json(const fs::path& p, const json& j) { dpa::write_file(p, j.dump(2) + "\n"); }

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::optional<int> epochs;
  bool bootstrap = false;
  bool victim = false;
};

int cmd_train(const TrainArgs& a) {
  dpa::RunConfig cfg = load(a.common);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.validate();
  const fs::path out = a.common.out;
  require_fresh(out);
  if (!a.victim && cfg.pretrain.path.empty() && !a.bootstrap) {
    throw dpa::ConfigError("no pretrained checkpoint configured ([train] pretrained); pass --bootstrap-pretrained");
  }
  if (!cfg.pretrain.path.empty() && !fs::exists(cfg.pretrain.path)) {
    throw dpa::ConfigError("pretrained checkpoint not found: " + cfg.pretrain.path.string());
  }
  const dpa::World world = dpa::make_world(cfg, cfg.seed);

  json summary = {{"seed", cfg.seed}};
  if (a.victim) {
    dpa::TrajectoryResult v = dpa::train_victim(cfg, world);
    dpa::CheckpointStore store;
    store.dataset_fingerprint = world.victim_split.train.fingerprint();
    store.config = cfg.train;
    store.config.epochs = cfg.victim.epochs;
    for (auto& c : v.checkpoints) store.add(std::move(c));
    store.save(out);
    summary["victim_epochs"] = cfg.victim.epochs;
    summary["final_loss"] = v.epoch_losses.back();
  } else {
    const dpa::BackboneParams pretrained = dpa::pretrained_backbone(cfg, world);
    const dpa::DpoResult r = dpa::train_surrogates(cfg, world, pretrained, cfg.train.epochs);
    r.store.save(out);
    dpa::save_dataset(out / "dataset", world.surrogate.train);
    const auto selected = dpa::select_checkpoints(r.store, cfg.train.epochs);
    summary["epochs"] = cfg.train.epochs;
    summary["checkpoints"] = {{"P", r.store.count(dpa::Trajectory::kPretrained)},
                              {"A", r.store.count(dpa::Trajectory::kRandom)}};
    summary["final_loss"] = {{"P", r.losses_pretrained.back()}, {"A", r.losses_random.back()}};
    summary["selection"] = {{"g", selected.size()}, {"models", dpa::describe(selected)}};
  }
  write_json(out / "config.json", cfg.to_json());
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

// ---- attack --------------------------------------------------------------

struct AttackArgs {
  Common common;
  std::string store;
  std::string mode = "dpo+hma";
  std::optional<double> eta;
};

int cmd_attack(const AttackArgs& a) {
  dpa::RunConfig cfg = load(a.common);
  const dpa::AttackMode mode = dpa::parse_mode(a.mode);
  if (a.eta) cfg.attack.eta = *a.eta;
  cfg.validate();
  const fs::path out = a.common.out;
  require_fresh(out);
  if (a.store.empty()) throw dpa::ConfigError("--store is required");

  const dpa::World world = dpa::make_world(cfg, cfg.seed);
  const dpa::CheckpointStore store = dpa::CheckpointStore::load(a.store);
  if (store.dataset_fingerprint != world.surrogate.train.fingerprint()) {
    throw std::runtime_error("store " + a.store + " was trained on a different dataset than this config produces");
  }
  const int c = cfg.train.epochs;
  const auto models = dpa::models_for(mode, store, c);
  const auto params = dpa::params_of(models);
  dpa::AttackConfig ac = cfg.attack;
  ac.eta = dpa::eta_for(mode, cfg.attack);

  fs::create_directories(out);
  double max_linf = 0.0;
  std::size_t violations = 0;
  json pairs = json::array();
  for (std::size_t i = 0; i < world.pairs.size(); ++i) {
    const auto& p = world.pairs.pairs[i];
    const dpa::Tensor xs = world.surrogate.eval.sample(p.source);
    const dpa::Tensor xt = world.surrogate.eval.sample(p.target);
    const dpa::AttackTrace trace =
        mode == dpa::AttackMode::kDma ? dpa::craft_dma(xs, xt, params, ac) : dpa::craft(xs, xt, params, ac);
    if (!trace.completed) throw dpa::NumericError("pair " + std::to_string(i) + ": " + trace.error);
    json tj = dpa::trace_to_json(trace, ac, xs);
    tj["pair"] = {{"index", i}, {"source", p.source}, {"target", p.target}};
    max_linf = std::max(max_linf, tj["audit"]["max_linf"].get<double>());
    violations += tj["audit"]["violations"].get<std::size_t>();
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%04zu.json", i);
    write_json(out / name, tj);
    pairs.push_back({{"file", name}, {"source", p.source}, {"target", p.target}});
  }
  const json manifest = {{"config", cfg.to_json()},
                         {"mode", dpa::to_string(mode)},
                         {"eta", ac.eta},
                         {"models", dpa::describe(models)},
                         {"g", models.size()},
                         {"models_sha256", dpa::models_digest(models)},
                         {"pairs", pairs},
                         {"audit", {{"epsilon", ac.epsilon}, {"max_linf", max_linf}, {"violations", violations}}}};
  write_json(out / "manifest.json", manifest);
  std::cout << "mode " << dpa::to_string(mode) << ", g=" << models.size() << " (" << dpa::describe(models)
            << "), pairs " << world.pairs.size() << "\n";
  std::cout << "audit: max Linf " << max_linf << " (epsilon " << ac.epsilon << "), violations " << violations << "\n";
  if (violations != 0 || max_linf > ac.epsilon) throw VerificationFailure("constraint audit failed");
  return kOk;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string adv;
  std::string victim;
  std::string store;
  bool white_box = false;
};

int cmd_eval(const EvalArgs& a) {
  const dpa::RunConfig cfg = load(a.common);
  const fs::path out = a.common.out;
  require_fresh(out);
  if (a.adv.empty()) throw dpa::ConfigError("--adv is required");
  const fs::path adv_dir = a.adv;
  if (!fs::exists(adv_dir / "manifest.json")) throw std::runtime_error("no adversarial examples in " + a.adv);
  const json manifest = json::parse(dpa::read_file(adv_dir / "manifest.json"));
  if (manifest.at("pairs").empty()) throw std::runtime_error("no adversarial examples in " + a.adv);

  const dpa::World world = dpa::make_world(cfg, cfg.seed);
  std::vector<dpa::Tensor> adversarial, targets;
  for (const auto& p : manifest.at("pairs")) {
    const json tj = json::parse(dpa::read_file(adv_dir / p.at("file").get<std::string>()));
    adversarial.push_back(dpa::adversarial_from_json(tj));
    targets.push_back(world.surrogate.eval.sample(p.at("target").get<std::size_t>()));
  }

  dpa::Victim victim;
  double threshold = 0.0;
  json inputs;
  if (a.white_box) {
    if (a.store.empty()) throw dpa::ConfigError("--white-box needs --store");
    const dpa::CheckpointStore store = dpa::CheckpointStore::load(a.store);
    const auto models =
        dpa::models_for(dpa::parse_mode(manifest.at("mode").get<std::string>()), store, cfg.train.epochs);
    victim = dpa::Victim{"surrogate:" + dpa::describe(models), dpa::params_of(models)};
    threshold = dpa::victim_threshold(victim, world.surrogate.eval, cfg.eval.far);
    inputs = {{"store", a.store}, {"models_sha256", dpa::models_digest(models)}};
  } else {
    if (a.victim.empty()) throw dpa::ConfigError("--victim is required (or pass --white-box)");
    const dpa::CheckpointStore vs = dpa::CheckpointStore::load(a.victim);
    const auto last = vs.last_epoch(dpa::Trajectory::kRandom);
    if (!last) throw std::runtime_error("victim store has no checkpoints: " + a.victim);
    const dpa::Checkpoint& vc = vs.at(dpa::Trajectory::kRandom, *last);
    victim = dpa::Victim{"victim:" + a.victim, {vc.backbone}};
    threshold = dpa::victim_threshold(victim, world.victim_split.eval, cfg.eval.far);
    const std::vector<dpa::SurrogateModel> vm{{vc.tag, vc.epoch, vc.backbone}};
    inputs = {{"victim_store", a.victim}, {"victim_sha256", dpa::models_digest(vm)}};
  }
  const dpa::ASRReport report = dpa::asr(adversarial, targets, victim, threshold);
  const auto protocol =
      dpa::VerificationProtocol::all_pairs(a.white_box ? world.surrogate.eval : world.victim_split.eval);
  const json j = {{"config", cfg.to_json()},
                  {"mode", manifest.at("mode")},
                  {"adversarial_models_sha256", manifest.at("models_sha256")},
                  {"inputs", inputs},
                  {"protocol", protocol.counts()},
                  {"far", cfg.eval.far},
                  {"report", report.to_json()}};
  write_json(out, j);
  if (!(dpa::ASRReport::from_json(json::parse(dpa::read_file(out)).at("report")) == report)) {
    throw VerificationFailure("report did not round-trip through " + out.string());
  }
  std::cout << report.victim << ": threshold " << report.threshold << ", ASR " << report.asr << "% (" << report.successes
            << "/" << report.pairs << ")\n";
  return kOk;
}

// ---- ablate / sweep -------------------------------------------------------

int cmd_ablate(const Common& c) {
  const dpa::RunConfig cfg = load(c);
  require_fresh(c.out);
  const dpa::AblationReport r = dpa::run_ablation(cfg);
  write_json(c.out, {{"config", cfg.to_json()}, {"ablation", r.to_json()}});
  std::printf("%-8s %3s %18s %18s\n", "mode", "g", "black-box ASR", "white-box ASR");
  for (const auto& row : r.rows) {
    std::printf("%-8s %3zu %9.2f +- %5.2f %9.2f +- %5.2f\n", row.mode.c_str(), row.models, row.black_box.mean,
                row.black_box.stddev, row.white_box.mean, row.white_box.stddev);
  }
  return kOk;
}

int cmd_sweep(const Common& c, const std::string& param) {
  const dpa::RunConfig cfg = load(c);
  const dpa::SweepParam p = dpa::parse_sweep_param(param);
  require_fresh(c.out);
  const dpa::SweepReport r = dpa::run_sweep(cfg, p);
  write_json(c.out, {{"config", cfg.to_json()}, {"sweep", r.to_json()}});
  std::printf("%-10s %-8s %3s %18s\n", param.c_str(), "variant", "g", "black-box ASR");
  for (const auto& row : r.rows) {
    std::printf("%-10g %-8s %3zu %9.2f +- %5.2f\n", row.value, row.variant.c_str(), row.models, row.black_box.mean,
                row.black_box.stddev);
  }
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(bool negative_control) {
  const dpa::GradcheckSuite suite = dpa::run_gradcheck_suite();
  auto print = [](const dpa::GradcheckResult& r) {
    std::printf("%-4s %-52s worst rel err %.3e (tol %.0e, %zu coords)\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.worst, r.tolerance, r.coordinates);
  };
  for (const auto& r : suite.primitives) print(r);
  for (const auto& r : suite.composed) print(r);
  bool ok = suite.passed();
  if (negative_control) {
    const dpa::GradcheckResult bad = dpa::corrupted_rule_control();
    print(bad);
    std::printf("negative control %s\n", bad.passed ? "NOT detected" : "detected");
    ok = ok && !bad.passed;
  }
  std::printf("gradcheck %s\n", ok ? "passed" : "FAILED");
  return ok ? kOk : kVerificationFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diverse-parameters transfer-attack testbed"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "INI run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "override [experiment] seed");
    sub->add_option("--out", c.out, "fresh output path");
  };

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train surrogate trajectories (or the held-out victim)");
  add_common(train_cmd, train.common);
  train_cmd->add_option("--epochs", train.epochs, "override [train] epochs (c)");
  train_cmd->add_flag("--bootstrap-pretrained", train.bootstrap, "train the pretrained backbone on disjoint identities");
  train_cmd->add_flag("--victim", train.victim, "train the held-out victim instead");

  AttackArgs attack;
  auto* attack_cmd = app.add_subcommand("attack", "craft adversarial examples for the configured pairs");
  add_common(attack_cmd, attack.common);
  attack_cmd->add_option("--store", attack.store, "checkpoint store directory");
  attack_cmd->add_option("--mode", attack.mode, "vanilla|dpo|dpo+hma|dma|fm")
      ->check(CLI::IsMember({"vanilla", "dpo", "dpo+hma", "dma", "fm"}));
  attack_cmd->add_option("--eta", attack.eta, "override [attack] eta");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "attack success rate against a victim");
  add_common(eval_cmd, eval.common);
  eval_cmd->add_option("--adv", eval.adv, "attack output directory");
  eval_cmd->add_option("--victim", eval.victim, "victim store directory");
  eval_cmd->add_option("--store", eval.store, "surrogate store (with --white-box)");
  eval_cmd->add_flag("--white-box", eval.white_box, "evaluate against the surrogate ensemble itself");

  Common ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "vanilla / dpo / dpo+hma / fm ablation over seeds");
  add_common(ablate_cmd, ablate);

  Common sweep;
  std::string param = "c";
  auto* sweep_cmd = app.add_subcommand("sweep", "c or eta sweep over seeds");
  add_common(sweep_cmd, sweep);
  sweep_cmd->add_option("--param", param, "c|eta")->check(CLI::IsMember({"c", "eta"}));

  bool negative_control = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad_cmd->add_flag("--negative-control", negative_control, "also run a deliberately corrupted rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*attack_cmd) return cmd_attack(attack);
    if (*eval_cmd) return cmd_eval(eval);
    if (*ablate_cmd) return cmd_ablate(ablate);
    if (*sweep_cmd) return cmd_sweep(sweep, param);
    if (*grad_cmd) return cmd_gradcheck(negative_control);
  } catch (const dpa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
