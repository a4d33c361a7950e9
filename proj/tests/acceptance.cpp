// Runs acceptance criteria 1-10 and prints one [PASS]/[FAIL] line per
// criterion. Exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dpa/config.hpp"
#include "dpa/dpo.hpp"
#include "dpa/experiment.hpp"
#include "dpa/gradcheck.hpp"
#include "dpa/hma.hpp"
#include "dpa/parallel.hpp"
#include "dpa/rng.hpp"
#include "oracles.hpp"

using namespace dpa;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::vector<std::uint32_t> epochs_of(const std::vector<SurrogateModel>& ms, Trajectory tag) {
  std::vector<std::uint32_t> out;
  for (const auto& m : ms)
    if (m.tag == tag) out.push_back(m.epoch);
  return out;
}

std::string list(const std::vector<std::uint32_t>& v) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << '}';
  return os.str();
}

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckSuite suite = run_gradcheck_suite();
  const GradcheckResult control = corrupted_rule_control();
  const double elapsed = seconds_since(t0);
  double worst_primitive = 0.0, worst_composed = 0.0;
  for (const auto& r : suite.primitives) worst_primitive = std::max(worst_primitive, r.worst);
  for (const auto& r : suite.composed) worst_composed = std::max(worst_composed, r.worst);
  const bool pass = suite.passed() && worst_primitive < 1e-5 && worst_composed < 1e-4 && !control.passed &&
                    elapsed < 60.0;
  return {pass, fmt("%zu primitives worst %.2e (<1e-5), %zu composed worst %.2e (<1e-4), negative control %s, %.1f s",
                    suite.primitives.size(), worst_primitive, suite.composed.size(), worst_composed,
                    control.passed ? "NOT detected" : "detected", elapsed)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome loss_oracle() {
  BackboneSpec spec;
  spec.input_dim = 12;
  spec.hidden_widths = {16, 12};
  spec.embedding_dim = 8;
  spec.hook_layers = {1};
  Rng rng(2024);
  double worst = 0.0;
  int cases = 0, draws = 0;
  while (cases < 100) {
    ++draws;
    const auto seed = static_cast<std::uint64_t>(draws);
    const BackboneParams p = init_backbone(spec, seed);
    const HeadParams h = init_head(5, 8, seed + 7000);
    const Tensor x = oracle::random_tensor({4, 12}, seed + 9000, 0.0, 255.0);
    bool degenerate = false;
    for (std::size_t r = 0; r < 4; ++r) degenerate = degenerate || oracle::norm(oracle::embed_row(p, x, r)) == 0.0;
    if (degenerate) continue;
    std::vector<int> y(4);
    for (int& v : y) v = static_cast<int>(rng.below(5));
    const MarginSpec m{rng.uniform(1.0, 64.0), rng.uniform(0.01, 1.5)};
    Tape t;
    const double got = t.value(arcface_loss(t, bind_constant(t, p), t.constant(h.weight), t.constant(x), y, m)).item();
    worst = std::max(worst, std::abs(got - oracle::arcface_loss(p, h.weight, x, y, m.scale, m.margin)));
    ++cases;
  }
  return {worst < 1e-10, fmt("100 cases (b=4, s=5, r=8, random scale and margin), max abs diff %.2e (<1e-10)", worst)};
}

// ---- 3 ----------------------------------------------------------------------

CheckpointStore full_store(int c) {
  BackboneSpec spec;
  spec.input_dim = 4;
  spec.hidden_widths = {4};
  spec.embedding_dim = 2;
  spec.hook_layers = {1};
  CheckpointStore store;
  for (int e = 0; e <= c; ++e) {
    store.add({Trajectory::kPretrained, static_cast<std::uint32_t>(e), init_backbone(spec, 100 + e), {}});
    if (e > 0) store.add({Trajectory::kRandom, static_cast<std::uint32_t>(e), init_backbone(spec, 200 + e), {}});
  }
  return store;
}

Outcome selection_rule() {
  const auto s35 = select_checkpoints(full_store(35), 35);
  const auto p = epochs_of(s35, Trajectory::kPretrained), a = epochs_of(s35, Trajectory::kRandom);
  const std::size_t g1 = select_checkpoints(full_store(1), 1).size();
  const std::size_t g4 = select_checkpoints(full_store(4), 4).size();
  const bool pass = p == std::vector<std::uint32_t>{0, 1, 6, 11, 16, 21, 26, 31, 35} &&
                    a == std::vector<std::uint32_t>{1, 6, 11, 16, 21, 26, 31, 35} && s35.size() == 17 && g1 == 3 &&
                    g4 == 7 && kappa(35) == 5;
  return {pass, "c=35: P " + list(p) + " A " + list(a) + fmt(" g=%zu; c=1 g=%zu; c=4 g=%zu", s35.size(), g1, g4)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome constraint_safety(const RunConfig& cfg, SeedExperiment& run) {
  const auto ms = params_of(models_for(AttackMode::kDpoHma, run.store(), cfg.train.epochs));
  const auto& eval = run.world().surrogate.eval;
  const auto pairs = sample_attack_pairs(eval, 50, 4242);
  std::vector<AttackTrace> traces(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    traces[i] = craft(eval.sample(pairs.pairs[i].source), eval.sample(pairs.pairs[i].target), ms, cfg.attack);
  });
  std::size_t violations = 0, iterations = 0;
  double worst_linf = 0.0, lo = 255.0, hi = 0.0;
  bool completed = true;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const AttackTrace& t = traces[i];
    completed = completed && t.completed && t.max_perturbation.size() == static_cast<std::size_t>(cfg.attack.iterations);
    for (std::size_t k = 0; k < t.max_perturbation.size(); ++k) {
      ++iterations;
      worst_linf = std::max(worst_linf, t.max_perturbation[k]);
      lo = std::min(lo, t.min_pixel[k]);
      hi = std::max(hi, t.max_pixel[k]);
      if (t.max_perturbation[k] > cfg.attack.epsilon || t.min_pixel[k] < 0.0 || t.max_pixel[k] > 255.0) ++violations;
    }
    // Independent recheck of the final example.
    const Tensor xs = eval.sample(pairs.pairs[i].source);
    for (std::size_t j = 0; j < xs.size(); ++j) {
      const double v = t.adversarial.data()[j];
      if (std::abs(v - xs.data()[j]) > cfg.attack.epsilon || v < 0.0 || v > 255.0) ++violations;
    }
  }
  return {completed && violations == 0,
          fmt("50 pairs x %d iterations (%zu checked, g=%zu): max Linf %.6g (eps %g), pixels [%.6g, %.6g], %zu violations",
              cfg.attack.iterations, iterations, ms.size(), worst_linf, cfg.attack.epsilon, lo, hi, violations)};
}

// ---- 5 ----------------------------------------------------------------------

Outcome degeneracy(const RunConfig& cfg, SeedExperiment& run) {
  const auto ms = params_of(models_for(AttackMode::kDpoHma, run.store(), cfg.train.epochs));
  const auto& eval = run.world().surrogate.eval;
  const auto pairs = sample_attack_pairs(eval, 10, 77);

  // eta = 0 against the vanilla-ensemble attack.
  AttackConfig zero = cfg.attack;
  zero.eta = 0.0;
  std::size_t eta0_equal = 0;
  for (const auto& p : pairs.pairs) {
    const auto h = craft(eval.sample(p.source), eval.sample(p.target), ms, zero);
    const auto d = craft_dma(eval.sample(p.source), eval.sample(p.target), ms, zero);
    if (bitwise_equal(h.adversarial, d.adversarial) && h.losses == d.losses) ++eta0_equal;
  }

  // t = 1: a large eta changes nothing in a single iteration.
  AttackConfig one = cfg.attack;
  one.iterations = 1;
  one.eta = 0.5;
  std::size_t t1_equal = 0;
  for (const auto& p : pairs.pairs) {
    const Tensor xs = eval.sample(p.source), xt = eval.sample(p.target);
    const auto targets = target_embeddings(ms, xt);
    Tape tape;
    const Var x = tape.leaf(xs);
    Var total;
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const BoundBackbone b = bind_constant(tape, ms[i]);
      const Var d = tape.sub(tape.l2_normalize_rows(embed(tape, b, x).embedding), tape.constant(targets[i]));
      const Var term = tape.sum(tape.square(d));
      total = i == 0 ? term : tape.add(total, term);
    }
    const Tensor expected = attack_step(xs, tape.backward(total, {x}).at(x), xs, one);
    if (bitwise_equal(craft(xs, xt, ms, one).adversarial, expected)) ++t1_equal;
  }

  // Loss-norm sign invariance on single-model random cases, input and hooks.
  BackboneSpec spec;
  spec.input_dim = 12;
  spec.hidden_widths = {16, 14};
  spec.embedding_dim = 6;
  spec.hook_layers = {1, 2};
  std::size_t sign_equal = 0, sign_cases = 0;
  for (std::uint64_t seed = 1; sign_cases < 100; ++seed) {
    const std::vector<BackboneParams> m{init_backbone(spec, 500 + seed)};
    const Tensor xs = oracle::random_tensor({1, 12}, seed, 0.0, 255.0);
    const Tensor xt = oracle::random_tensor({1, 12}, seed + 9999, 0.0, 255.0);
    if (oracle::norm(oracle::embed_row(m[0], xs, 0)) == 0.0 || oracle::norm(oracle::embed_row(m[0], xt, 0)) == 0.0)
      continue;
    const auto targets = target_embeddings(m, xt);
    HardState state(1);
    const std::vector<Tensor> bufs{sign(oracle::random_tensor({1, 16}, seed + 1)),
                                   sign(oracle::random_tensor({1, 14}, seed + 2))};
    state.refresh(0, bufs);
    state.mark_primed();
    std::vector<Tensor> signs[2];
    for (LossNorm norm : {LossNorm::kSquared, LossNorm::kPlain}) {
      AttackConfig c = cfg.attack;
      c.norm = norm;
      c.eta = 0.05;
      Tape tape;
      std::vector<BoundBackbone> bound{bind_constant(tape, m[0])};
      const Var x = tape.leaf(xs);
      const auto agg = aggregate_loss(tape, bound, x, targets, &state, 2, c);
      std::vector<Var> req{x};
      req.insert(req.end(), agg.hooks[0].begin(), agg.hooks[0].end());
      const auto g = tape.backward(agg.loss, req);
      for (Var v : req) signs[norm == LossNorm::kSquared ? 0 : 1].push_back(sign(g.at(v)));
    }
    bool same = true;
    for (std::size_t k = 0; k < signs[0].size(); ++k) same = same && bitwise_equal(signs[0][k], signs[1][k]);
    if (same) ++sign_equal;
    ++sign_cases;
  }
  const bool pass = eta0_equal == pairs.size() && t1_equal == pairs.size() && sign_equal == sign_cases;
  return {pass, fmt("eta=0 == dma bitwise %zu/%zu; t=1 neutral %zu/%zu; squared vs plain signs equal %zu/%zu",
                    eta0_equal, pairs.size(), t1_equal, pairs.size(), sign_equal, sign_cases)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome white_box(const RunConfig& cfg, SeedExperiment& run, double build_seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ms = models_for(AttackMode::kDpoHma, run.store(), cfg.train.epochs);
  const ASRReport r = run.white_box(ms, cfg.attack.eta);
  const double elapsed = build_seconds + seconds_since(t0);
  return {r.asr >= 95.0 && elapsed < 300.0,
          fmt("ASR %.1f%% (%zu/%zu, >=95%%) on g=%zu surrogates, threshold %.4f at FAR %g, n=%d, %.1f s", r.asr,
              r.successes, r.pairs, ms.size(), r.threshold, cfg.eval.far, cfg.attack.iterations, elapsed)};
}

// ---- 7, 8 -------------------------------------------------------------------

std::string values(const Stat& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.values.size(); ++i) out += fmt(i ? ",%.1f" : "%.1f", s.values[i]);
  return out + "]";
}

Outcome table7(const AblationReport& ab, double seconds) {
  const double v = ab.row("vanilla").black_box.mean, d = ab.row("dpo").black_box.mean,
               h = ab.row("dpo+hma").black_box.mean;
  return {v < d && d < h && ab.seeds.size() >= 5 && seconds < 900.0,
          fmt("%zu seeds, means: vanilla %.2f%%, dpo %.2f%%, dpo+hma %.2f%% (per seed %s / %s / %s), %.1f s", ab.seeds.size(),
              v, d, h, values(ab.row("vanilla").black_box).c_str(), values(ab.row("dpo").black_box).c_str(),
              values(ab.row("dpo+hma").black_box).c_str(), seconds)};
}

Outcome table8(const AblationReport& ab) {
  const double d = ab.row("dpo").black_box.mean, f = ab.row("fm").black_box.mean;
  return {d > f && ab.seeds.size() >= 5,
          fmt("%zu seeds, means: F (g=%zu) %.2f%% vs F^m (g=%zu) %.2f%%", ab.seeds.size(), ab.row("dpo").models, d,
              ab.row("fm").models, f)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome trends(const RunConfig& cfg, const SweepReport& cs, const SweepReport& es) {
  const int c_min = *std::min_element(cfg.eval.c_grid.begin(), cfg.eval.c_grid.end());
  const int c_max = *std::max_element(cfg.eval.c_grid.begin(), cfg.eval.c_grid.end());
  bool a = cs.row(c_max, "diverse").black_box.mean >= cs.row(c_min, "diverse").black_box.mean;
  bool all_zero = true;
  std::string c_text;
  for (int c : cfg.eval.c_grid) {
    const double s = cs.row(c, "single").black_box.mean, d = cs.row(c, "diverse").black_box.mean;
    a = a && d >= s;
    all_zero = all_zero && s == 0.0 && d == 0.0;
    c_text += fmt(" c=%d %.1f/%.1f", c, s, d);
  }
  std::vector<double> grid = cfg.eval.eta_grid;
  std::sort(grid.begin(), grid.end());
  const double at_zero = es.row(grid.front(), grid.front() == 0.0 ? "dma" : "hma").black_box.mean;
  const double at_max = es.row(grid.back(), "hma").black_box.mean;
  double best = -1.0, best_eta = 0.0;
  for (std::size_t i = 1; i + 1 < grid.size(); ++i) {
    const double m = es.row(grid[i], "hma").black_box.mean;
    if (m > best) best = m, best_eta = grid[i];
  }
  std::string e_text;
  for (double eta : grid) e_text += fmt(" %g:%.1f", eta, es.row(eta, eta == 0.0 ? "dma" : "hma").black_box.mean);
  const bool b = grid.size() >= 3 && best > at_zero && best > at_max;
  return {a && b, fmt("(a) %s: single/diverse%s%s; (b) %s: best interior eta %g %.2f%% vs eta=0 %.2f%%, largest %.2f%%;%s",
                      a ? "holds" : "fails", c_text.c_str(), all_zero && a ? " (degenerate: all ASR 0)" : "",
                      b ? "holds" : "fails", best_eta, best, at_zero, at_max, e_text.c_str())};
}

// ---- 10 ---------------------------------------------------------------------

bool stores_equal(const CheckpointStore& a, const CheckpointStore& b) {
  if (a.checkpoints().size() != b.checkpoints().size()) return false;
  for (std::size_t i = 0; i < a.checkpoints().size(); ++i) {
    const Checkpoint &x = a.checkpoints()[i], &y = b.checkpoints()[i];
    if (x.tag != y.tag || x.epoch != y.epoch || !bitwise_equal(x.backbone, y.backbone)) return false;
    if (!bitwise_equal(x.head.weight, y.head.weight)) return false;
  }
  return true;
}

RunConfig small_run() {
  RunConfig c;
  c.data.classes = 4;
  c.data.per_class = 6;
  c.data.sigma = 30.0;
  c.backbone.input_dim = 16;
  c.backbone.hidden_widths = {20, 20};
  c.backbone.embedding_dim = 6;
  c.train.epochs = 4;
  c.train.batch_size = 8;
  c.pretrain.identities = 4;
  c.pretrain.per_class = 4;
  c.pretrain.epochs = 2;
  c.victim.per_class = 6;
  c.victim.epochs = 4;
  c.attack.iterations = 10;
  c.eval.pairs = 6;
  c.eval.seeds = {1, 2};
  c.eval.c_grid = {1, 4};
  c.eval.eta_grid = {0.0, 1e-2};
  return c;
}

Outcome determinism(const RunConfig& cfg, SeedExperiment& first) {
  SeedExperiment again(cfg, first.world().seed, cfg.train.epochs);
  const bool stores = stores_equal(first.store(), again.store());
  const auto ms = models_for(AttackMode::kDpoHma, first.store(), cfg.train.epochs);
  const auto ms2 = models_for(AttackMode::kDpoHma, again.store(), cfg.train.epochs);
  const auto& adv1 = first.adversarials(ms, cfg.attack.eta);
  const auto& adv2 = again.adversarials(ms2, cfg.attack.eta);
  bool adversarial = adv1.size() == adv2.size();
  for (std::size_t i = 0; adversarial && i < adv1.size(); ++i) adversarial = bitwise_equal(adv1[i], adv2[i]);
  const bool report = first.black_box(ms, cfg.attack.eta) == again.black_box(ms2, cfg.attack.eta) &&
                      first.victim_threshold() == again.victim_threshold();

  const RunConfig small = small_run();
  const std::string r1 = run_ablation(small).to_json().dump();
  const std::string r2 = run_ablation(small).to_json().dump();
  const bool reports = r1 == r2;

  const auto dir = std::filesystem::temp_directory_path() / ("dpa_acceptance_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  first.store().save(dir);
  const CheckpointStore loaded = CheckpointStore::load(dir);
  bool files = true;
  for (const auto& c : first.store().checkpoints()) {
    const std::string bytes = encode_dpac(checkpoint_file(c));
    files = files && encode_dpac(checkpoint_file(checkpoint_from_file(decode_dpac(bytes)))) == bytes;
  }
  const bool round_trip = stores_equal(first.store(), loaded) && files &&
                          loaded.dataset_fingerprint == first.store().dataset_fingerprint;
  std::filesystem::remove_all(dir);

  return {stores && adversarial && report && reports && round_trip,
          fmt("checkpoints %s (%zu), adversarials %s (%zu), seed report %s, ablation report %s, DPAC round trip %s",
              stores ? "identical" : "DIFFER", first.store().checkpoints().size(), adversarial ? "identical" : "DIFFER",
              adv1.size(), report ? "identical" : "DIFFERS", reports ? "identical" : "DIFFERS",
              round_trip ? "bitwise" : "BROKEN")};
}

}  // namespace

int main() {
  const RunConfig desk = load_config(DPA_SOURCE_DIR "/configs/desk.ini");
  int failures = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::printf("[%s] AC%d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };

  report(1, "gradient correctness", gradient_correctness());
  report(2, "loss oracle equivalence", loss_oracle());
  report(3, "selection rule", selection_rule());

  const auto t_seed = std::chrono::steady_clock::now();
  SeedExperiment seed1(desk, desk.eval.seeds.front(), desk.train.epochs);
  const double seed_seconds = seconds_since(t_seed);

  report(4, "constraint safety", constraint_safety(desk, seed1));
  report(5, "degeneracy equivalences", degeneracy(desk, seed1));
  report(6, "white-box potency", white_box(desk, seed1, seed_seconds));

  const auto t_ab = std::chrono::steady_clock::now();
  const auto runs = build_experiments(desk, required_epochs(desk));
  const AblationReport ab = run_ablation(desk, runs);
  const double ab_seconds = seconds_since(t_ab);
  report(7, "ablation ordering vanilla < dpo < dpo+hma", table7(ab, ab_seconds));
  report(8, "full selection beats endpoints", table8(ab));

  const SweepReport cs = run_sweep(desk, SweepParam::kC, runs);
  const SweepReport es = run_sweep(desk, SweepParam::kEta, runs);
  report(9, "c and eta sweep trends", trends(desk, cs, es));

  report(10, "determinism and persistence", determinism(desk, seed1));

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
