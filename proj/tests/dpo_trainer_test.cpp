#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <unistd.h>

#include "dpa/config.hpp"
#include "dpa/container.hpp"
#include "dpa/data.hpp"
#include "dpa/dpo.hpp"
#include "dpa/rng.hpp"
#include "oracles.hpp"

using namespace dpa;

namespace {

BackboneSpec tiny_spec() {
  BackboneSpec s;
  s.input_dim = 6;
  s.hidden_widths = {5};
  s.embedding_dim = 3;
  s.hook_layers = {1};
  return s;
}

// A store holding P epochs 0..c and A epochs 1..c with distinct parameters.
CheckpointStore full_store(int c) {
  CheckpointStore store;
  for (int e = 0; e <= c; ++e) {
    store.add({Trajectory::kPretrained, static_cast<std::uint32_t>(e), init_backbone(tiny_spec(), 1000 + e), {}});
    if (e > 0) store.add({Trajectory::kRandom, static_cast<std::uint32_t>(e), init_backbone(tiny_spec(), 2000 + e), {}});
  }
  return store;
}

std::vector<std::uint32_t> epochs_of(const std::vector<SurrogateModel>& models, Trajectory tag) {
  std::vector<std::uint32_t> out;
  for (const auto& m : models)
    if (m.tag == tag) out.push_back(m.epoch);
  return out;
}

// Selection enumerated straight from the rule: stride floor(sqrt(c)), residue 1.
std::vector<std::uint32_t> enumerate_rule(int c, bool pretrained) {
  int k = 0;
  while ((k + 1) * (k + 1) <= c) ++k;
  std::set<std::uint32_t> s;
  if (pretrained) s.insert(0);
  for (int j = 1; j <= c; ++j)
    if (k == 1 || j % k == 1) s.insert(static_cast<std::uint32_t>(j));
  s.insert(static_cast<std::uint32_t>(c));
  return {s.begin(), s.end()};
}

struct Toy {
  IdentityDataset data;
  BackboneSpec spec;
  TrainConfig config;
  MarginSpec margin;
};

Toy toy(std::uint64_t seed, int epochs) {
  Toy t;
  t.spec.input_dim = 16;
  t.spec.hidden_widths = {24};
  t.spec.embedding_dim = 8;
  t.spec.hook_layers = {1};
  t.data = generate(seed, 4, 12, 16, 30.0);
  t.config.epochs = epochs;
  t.config.batch_size = 8;
  t.config.seed = seed;
  return t;
}

}  // namespace

TEST_SUITE("selection") {
  TEST_CASE("kappa values") {
    CHECK(kappa(35) == 5);
    CHECK(kappa(1) == 1);
    CHECK(kappa(24) == 4);
    CHECK(kappa(25) == 5);
    CHECK_THROWS_AS(kappa(0), ValueError);
  }

  TEST_CASE("documented selections") {
    const auto store = full_store(35);
    const auto v35 = select_checkpoints(store, 35);
    CHECK(epochs_of(v35, Trajectory::kPretrained) == std::vector<std::uint32_t>{0, 1, 6, 11, 16, 21, 26, 31, 35});
    CHECK(epochs_of(v35, Trajectory::kRandom) == std::vector<std::uint32_t>{1, 6, 11, 16, 21, 26, 31, 35});
    CHECK(v35.size() == 17);

    const auto v1 = select_checkpoints(store, 1);
    CHECK(epochs_of(v1, Trajectory::kPretrained) == std::vector<std::uint32_t>{0, 1});
    CHECK(epochs_of(v1, Trajectory::kRandom) == std::vector<std::uint32_t>{1});
    CHECK(v1.size() == 3);

    const auto v4 = select_checkpoints(store, 4);
    CHECK(epochs_of(v4, Trajectory::kPretrained) == std::vector<std::uint32_t>{0, 1, 3, 4});
    CHECK(epochs_of(v4, Trajectory::kRandom) == std::vector<std::uint32_t>{1, 3, 4});
    CHECK(v4.size() == 7);
  }

  TEST_CASE("selection follows the enumerated rule for every c, is ordered, bounded and pure") {
    const auto store = full_store(64);
    for (int c = 1; c <= 64; ++c) {
      const auto v = select_checkpoints(store, c);
      const auto p = epochs_of(v, Trajectory::kPretrained);
      const auto a = epochs_of(v, Trajectory::kRandom);
      CHECK(p == enumerate_rule(c, true));
      CHECK(a == enumerate_rule(c, false));
      // P block precedes A block.
      CHECK(std::is_partitioned(v.begin(), v.end(), [](const SurrogateModel& m) { return m.tag == Trajectory::kPretrained; }));
      const int k = kappa(c);
      for (const auto& m : v) {
        const bool ok = (k == 1) || (static_cast<int>(m.epoch) % k == 1) || m.epoch == static_cast<std::uint32_t>(c) ||
                        (m.epoch == 0 && m.tag == Trajectory::kPretrained);
        CHECK(ok);
        CHECK(bitwise_equal(m.params, store.at(m.tag, m.epoch).backbone));
      }
      const int ceil_ck = (c + k - 1) / k;
      CHECK(static_cast<int>(v.size()) <= 2 * (ceil_ck + 1) + 1);
      CHECK(describe(v) == describe(select_checkpoints(store, c)));
    }
  }

  TEST_CASE("single is the pretrained part of diverse; endpoints are three models") {
    const auto store = full_store(8);
    for (int c : {1, 2, 4, 8}) {
      const auto diverse = select_checkpoints(store, c);
      const auto single = select_single(store, c);
      CHECK(single.size() < diverse.size());
      for (std::size_t i = 0; i < single.size(); ++i) {
        CHECK(single[i].tag == diverse[i].tag);
        CHECK(single[i].epoch == diverse[i].epoch);
      }
    }
    const auto ends = select_endpoints(store, 8);
    REQUIRE(ends.size() == 3);
    CHECK(describe(ends) == "P0,P8,A8");
  }

  TEST_CASE("missing checkpoints name the tag and epoch") {
    CheckpointStore store = full_store(3);
    try {
      select_checkpoints(store, 4);
      FAIL("expected IncompleteStoreError");
    } catch (const IncompleteStoreError& e) {
      CHECK(e.tag() == Trajectory::kPretrained);
      CHECK(e.epoch() == 4);
    }
  }

  TEST_CASE("store rejects duplicates and A epoch 0") {
    CheckpointStore store;
    store.add({Trajectory::kPretrained, 1, init_backbone(tiny_spec(), 1), {}});
    CHECK_THROWS_AS(store.add({Trajectory::kPretrained, 1, init_backbone(tiny_spec(), 2), {}}), ValueError);
    CHECK_THROWS_AS(store.add({Trajectory::kRandom, 0, init_backbone(tiny_spec(), 2), {}}), ValueError);
  }
}

TEST_SUITE("sgd") {
  TEST_CASE("zero gradient leaves parameters unchanged; scalar arithmetic") {
    Tensor w = Tensor::vector({1.0});
    Tape t;
    const Var v = t.leaf(w);
    ParamSlot slot{&w, v};
    GradientMap zero;
    zero.insert(v, Tensor::vector({0.0}));
    sgd_step(std::span(&slot, 1), zero, 0.1);
    CHECK(w[0] == 1.0);
    GradientMap g;
    g.insert(v, Tensor::vector({0.5}));
    sgd_step(std::span(&slot, 1), g, 0.1);
    CHECK(w[0] == doctest::Approx(0.95).epsilon(1e-15));
    GradientMap none;
    CHECK_THROWS_AS(sgd_step(std::span(&slot, 1), none, 0.1), ValueError);
  }

  TEST_CASE("one step on a convex quadratic lowers it") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Tensor w = oracle::random_tensor({5}, seed, -4.0, 4.0);
      auto f = [](const Tensor& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (i + 1.0) * x[i] * x[i];
        return s;
      };
      const double before = f(w);
      Tape t;
      const Var v = t.leaf(w);
      Tensor weights({5});
      for (std::size_t i = 0; i < 5; ++i) weights[i] = i + 1.0;
      const Var loss = t.sum(t.hadamard(t.constant(weights), t.square(v)));
      ParamSlot slot{&w, v};
      sgd_step(std::span(&slot, 1), t.backward(loss, {v}), 0.05);
      CHECK(f(w) < before);
    }
  }
}

TEST_SUITE("trajectories") {
  TEST_CASE("one epoch gives one checkpoint") {
    Toy t = toy(3, 1);
    const auto r = train_trajectory(init_backbone(t.spec, 1), init_head(4, 8, 2), t.data, t.config,
                                    Trajectory::kRandom, t.margin);
    REQUIRE(r.checkpoints.size() == 1);
    CHECK(r.checkpoints[0].epoch == 1);
    CHECK(r.epoch_losses.size() == 1);
  }

  TEST_CASE("training is bitwise deterministic") {
    Toy t = toy(4, 3);
    auto run = [&] {
      return train_trajectory(init_backbone(t.spec, 1), init_head(4, 8, 2), t.data, t.config, Trajectory::kRandom,
                              t.margin);
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.checkpoints.size() == b.checkpoints.size());
    for (std::size_t i = 0; i < a.checkpoints.size(); ++i)
      CHECK(bitwise_equal(a.checkpoints[i].backbone, b.checkpoints[i].backbone));
    CHECK(a.epoch_losses == b.epoch_losses);
  }

  TEST_CASE("final-epoch loss is below first-epoch loss on the desk dataset for at least 9 of 10 seeds") {
    const RunConfig cfg = load_config(DPA_SOURCE_DIR "/configs/desk.ini");
    int improved = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto data = generate(seed, cfg.data.classes, cfg.data.per_class, cfg.backbone.input_dim, cfg.data.sigma);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      const auto r = train_trajectory(init_backbone(cfg.backbone, seed + 100),
                                      init_head(cfg.data.classes, cfg.backbone.embedding_dim, seed + 200), data, tc,
                                      Trajectory::kRandom, cfg.margin);
      if (r.epoch_losses.back() < r.epoch_losses.front()) ++improved;
    }
    CHECK(improved >= 9);
  }

  TEST_CASE("bad inputs are rejected") {
    Toy t = toy(5, 1);
    CHECK_THROWS_AS(train_trajectory(init_backbone(t.spec, 1), init_head(3, 8, 2), t.data, t.config,
                                     Trajectory::kRandom, t.margin),
                    ValueError);
    TrainConfig bad = t.config;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValueError);
  }

  TEST_CASE("divergence reports epoch and batch") {
    Toy t = toy(6, 2);
    t.config.learning_rate = 1e300;
    try {
      train_trajectory(init_backbone(t.spec, 1), init_head(4, 8, 2), t.data, t.config, Trajectory::kRandom, t.margin);
      FAIL("expected DivergedTrainingError");
    } catch (const DivergedTrainingError& e) {
      CHECK(e.epoch() >= 1);
    }
  }

  TEST_CASE("dual trajectories: structure, epoch-0 identity, distinct starts") {
    Toy t = toy(7, 3);
    const auto pretrained = init_backbone(t.spec, 77);
    const auto r = run_dpo(pretrained, t.spec, t.data, t.config, t.margin, DpoSeeds{});
    CHECK(r.store.count(Trajectory::kPretrained) == 4);
    CHECK(r.store.count(Trajectory::kRandom) == 3);
    CHECK(bitwise_equal(r.store.at(Trajectory::kPretrained, 0).backbone, pretrained));
    CHECK_FALSE(bitwise_equal(r.store.at(Trajectory::kPretrained, 1).backbone, r.store.at(Trajectory::kRandom, 1).backbone));
    CHECK(r.losses_pretrained.size() == 3);
    CHECK(r.losses_random.size() == 3);
  }

  TEST_CASE("parallel and sequential trajectories agree bitwise") {
    Toy t = toy(8, 2);
    const auto pretrained = init_backbone(t.spec, 78);
    const auto a = run_dpo(pretrained, t.spec, t.data, t.config, t.margin, DpoSeeds{}, false);
    const auto b = run_dpo(pretrained, t.spec, t.data, t.config, t.margin, DpoSeeds{}, true);
    REQUIRE(a.store.checkpoints().size() == b.store.checkpoints().size());
    for (std::size_t i = 0; i < a.store.checkpoints().size(); ++i)
      CHECK(bitwise_equal(a.store.checkpoints()[i].backbone, b.store.checkpoints()[i].backbone));
  }
}

TEST_SUITE("persistence") {
  TEST_CASE("checkpoint container layout") {
    Checkpoint c{Trajectory::kRandom, 7, init_backbone(tiny_spec(), 3), init_head(2, 3, 4)};
    const std::string bytes = encode_dpac(checkpoint_file(c));
    CHECK(bytes.substr(0, 4) == "DPAC");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version, little-endian u16
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    CHECK(bytes[6] == 'A');
    CHECK(static_cast<unsigned char>(bytes[7]) == 7);  // epoch u32
    const std::uint32_t count = static_cast<unsigned char>(bytes[11]);
    CHECK(count == 5);  // two layers x (weight, bias) + head
    const Checkpoint back = checkpoint_from_file(decode_dpac(bytes));
    CHECK(back.tag == c.tag);
    CHECK(back.epoch == c.epoch);
    CHECK(bitwise_equal(back.backbone, c.backbone));
    CHECK(bitwise_equal(back.head.weight, c.head.weight));
  }

  TEST_CASE("malformed containers are rejected") {
    Checkpoint c{Trajectory::kPretrained, 0, init_backbone(tiny_spec(), 3), {}};
    std::string bytes = encode_dpac(checkpoint_file(c));
    CHECK_THROWS_AS(decode_dpac(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(decode_dpac(bytes + "x"), FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_dpac(bad), FormatError);
  }

  TEST_CASE("store save and load round-trip bitwise; tampering is detected") {
    CheckpointStore store = full_store(3);
    store.dataset_fingerprint = "abc";
    store.config.epochs = 3;
    const auto dir = std::filesystem::temp_directory_path() / ("dpa_store_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    store.save(dir);
    const CheckpointStore back = CheckpointStore::load(dir);
    CHECK(back.dataset_fingerprint == "abc");
    CHECK(back.config.epochs == 3);
    REQUIRE(back.checkpoints().size() == store.checkpoints().size());
    for (std::size_t i = 0; i < back.checkpoints().size(); ++i) {
      CHECK(back.checkpoints()[i].tag == store.checkpoints()[i].tag);
      CHECK(back.checkpoints()[i].epoch == store.checkpoints()[i].epoch);
      CHECK(bitwise_equal(back.checkpoints()[i].backbone, store.checkpoints()[i].backbone));
    }
    std::string bytes = read_file(dir / "P_0001.dpac");
    bytes[bytes.size() - 1] ^= 1;
    write_file(dir / "P_0001.dpac", bytes);
    CHECK_THROWS_AS(CheckpointStore::load(dir), FormatError);
    std::filesystem::remove_all(dir);
  }
}
