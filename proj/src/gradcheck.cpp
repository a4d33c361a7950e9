#include "dpa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dpa/errors.hpp"
#include "dpa/hma.hpp"
#include "dpa/model.hpp"
#include "dpa/rng.hpp"

namespace dpa {

namespace {

constexpr double kPrimitiveTol = 1e-5;
constexpr double kComposedTol = 1e-4;

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero by `gap`, for ops with a kink at zero.
Tensor away_from_zero(Rng& rng, Shape shape, double gap, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(gap, hi);
  return t;
}

Tensor random_signs(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return t;
}

double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  return tape.value(build(tape, vars)).item();
}

/// Compares `analytic[i]` against central differences of `build` at `inputs`.
GradcheckResult compare(const std::string& name, const LossBuilder& build, std::vector<Tensor> inputs,
                        const std::vector<Tensor>& analytic, double tolerance, const GradcheckOptions& options) {
  GradcheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i][k];
      const double h = options.relative_step * std::max(std::abs(x0), 1.0);
      inputs[i][k] = x0 + h;
      const double xp = inputs[i][k];
      const double fp = evaluate(build, inputs);
      inputs[i][k] = x0 - h;
      const double xm = inputs[i][k];
      const double fm = evaluate(build, inputs);
      inputs[i][k] = x0;
      const double numeric = (fp - fm) / (xp - xm);
      const double a = analytic[i][k];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      r.worst = std::max(r.worst, err);
      ++r.coordinates;
    }
  }
  r.passed = r.worst < tolerance;
  return r;
}

LossBuilder projected(std::function<Var(Tape&, std::span<const Var>)> op, Tensor weights) {
  return [op = std::move(op), w = std::move(weights)](Tape& tape, std::span<const Var> in) {
    return tape.sum(tape.hadamard(tape.borrow(w), op(tape, in)));
  };
}

BackboneSpec small_spec() {
  BackboneSpec s;
  s.input_dim = 10;
  s.hidden_widths = {16, 12};
  s.embedding_dim = 6;
  s.hook_layers = {1, 2};
  return s;
}

/// Downstream of hook j for one model, as a function of the hook value.
Var replay_from_hook(Tape& tape, const BoundBackbone& model, Var omega, std::size_t j, std::span<const Tensor> buffers,
                     const Tensor& target, double inv_g, const AttackConfig& config) {
  int start = config.hooks[j] + 1;
  for (std::size_t jj = j + 1; jj < config.hooks.size(); ++jj) {
    omega = forward_segment(tape, model, start, config.hooks[jj], omega);
    Tensor shift(buffers[jj].shape());
    for (std::size_t k = 0; k < shift.size(); ++k) shift[k] = config.eta * buffers[jj][k];
    omega = tape.add(omega, tape.constant(std::move(shift)));
    start = config.hooks[jj] + 1;
  }
  const Var e = start <= model.layer_count() ? forward_segment(tape, model, start, model.layer_count(), omega) : omega;
  Var term = tape.sum(tape.square(tape.sub(tape.l2_normalize_rows(e), tape.borrow(target))));
  if (config.norm == LossNorm::kPlain) term = tape.sqrt_clamped(term);
  return tape.scale(term, inv_g);
}

void aggregate_checks(Rng& rng, LossNorm norm, std::vector<GradcheckResult>& out, const GradcheckOptions& opt) {
  const BackboneSpec spec = small_spec();
  const std::vector<BackboneParams> models{init_backbone(spec, rng.next_u64()), init_backbone(spec, rng.next_u64())};
  AttackConfig config;
  config.hooks = {1, 2};
  config.eta = 0.05;
  config.norm = norm;
  const Tensor x0 = random_tensor(rng, {1, spec.input_dim}, 20.0, 235.0);
  const Tensor xt = random_tensor(rng, {1, spec.input_dim}, 20.0, 235.0);
  const std::vector<Tensor> targets = target_embeddings(models, xt);
  const std::string tag = norm == LossNorm::kSquared ? "squared" : "plain";

  HardState state(models.size());
  for (std::size_t i = 0; i < models.size(); ++i) {
    std::vector<Tensor> g;
    for (int h : config.hooks) g.push_back(random_signs(rng, {1, spec.layer_output_dim(h)}));
    state.refresh(i, g);
  }
  state.mark_primed();

  for (int t : {1, 2}) {
    const HardState fresh(models.size());
    const HardState* st = t == 1 ? &fresh : &state;
    auto build = [&](Tape& tape, std::span<const Var> in) {
      std::vector<BoundBackbone> bound;
      for (const auto& m : models) bound.push_back(bind_constant(tape, m));
      return aggregate_loss(tape, bound, in[0], targets, st, t, config).loss;
    };
    out.push_back(check_gradient("aggregate_loss[" + tag + ",t=" + std::to_string(t) + "] d/dx", build, {x0},
                                 kComposedTol, opt));
  }

  // Hook gradients from the full graph at t = 2, checked by replaying the
  // downstream computation from a perturbed hook value.
  Tape tape;
  std::vector<BoundBackbone> bound;
  for (const auto& m : models) bound.push_back(bind_constant(tape, m));
  const Var xv = tape.leaf(x0);
  const AggregateLoss agg = aggregate_loss(tape, bound, xv, targets, &state, 2, config);
  std::vector<Var> hooks;
  for (const auto& h : agg.hooks) hooks.insert(hooks.end(), h.begin(), h.end());
  const GradientMap grads = tape.backward(agg.loss, hooks);
  const double inv_g = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t j = 0; j < config.hooks.size(); ++j) {
      const Var h = agg.hooks[i][j];
      auto replay = [&, i, j](Tape& tp, std::span<const Var> in) {
        const BoundBackbone b = bind_constant(tp, models[i]);
        return replay_from_hook(tp, b, in[0], j, state.buffers(i), targets[i], inv_g, config);
      };
      out.push_back(compare("aggregate_loss[" + tag + "] d/dhook(model " + std::to_string(i) + ", layer " +
                                std::to_string(config.hooks[j]) + ")",
                            replay, {tape.value(h)}, {grads.at(h)}, kComposedTol, opt));
    }
  }
}

}  // namespace

GradcheckResult check_gradient(const std::string& name, const LossBuilder& build, std::vector<Tensor> inputs,
                               double tolerance, const GradcheckOptions& options) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  const Var loss = build(tape, vars);
  const GradientMap grads = tape.backward(loss, vars);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(grads.at(v));
  return compare(name, build, std::move(inputs), analytic, tolerance, options);
}

bool GradcheckSuite::passed() const {
  auto ok = [](const GradcheckResult& r) { return r.passed; };
  return std::all_of(primitives.begin(), primitives.end(), ok) && std::all_of(composed.begin(), composed.end(), ok);
}

GradcheckSuite run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  GradcheckSuite suite;
  const GradcheckOptions opt;
  auto prim = [&](const std::string& name, const LossBuilder& b, std::vector<Tensor> in) {
    suite.primitives.push_back(check_gradient(name, b, std::move(in), kPrimitiveTol, opt));
  };
  auto w = [&](Shape s) { return random_tensor(rng, std::move(s), -1.0, 1.0); };

  prim("matmul", projected([](Tape& t, auto in) { return t.matmul(in[0], in[1]); }, w({3, 2})),
       {w({3, 4}), w({4, 2})});
  prim("transpose", projected([](Tape& t, auto in) { return t.transpose(in[0]); }, w({4, 3})), {w({3, 4})});
  prim("add", projected([](Tape& t, auto in) { return t.add(in[0], in[1]); }, w({3, 4})), {w({3, 4}), w({3, 4})});
  prim("sub", projected([](Tape& t, auto in) { return t.sub(in[0], in[1]); }, w({3, 4})), {w({3, 4}), w({3, 4})});
  prim("hadamard", projected([](Tape& t, auto in) { return t.hadamard(in[0], in[1]); }, w({3, 4})),
       {w({3, 4}), w({3, 4})});
  prim("scale", projected([](Tape& t, auto in) { return t.scale(in[0], -2.5); }, w({3, 4})), {w({3, 4})});
  prim("add_scalar", projected([](Tape& t, auto in) { return t.add_scalar(in[0], 0.75); }, w({3, 4})), {w({3, 4})});
  prim("add_row", projected([](Tape& t, auto in) { return t.add_row(in[0], in[1]); }, w({3, 4})),
       {w({3, 4}), w({4})});
  prim("relu", projected([](Tape& t, auto in) { return t.relu(in[0]); }, w({3, 4})),
       {away_from_zero(rng, {3, 4}, 0.05, 1.0)});
  prim("sqrt_clamped", projected([](Tape& t, auto in) { return t.sqrt_clamped(in[0]); }, w({3, 4})),
       {random_tensor(rng, {3, 4}, 0.2, 2.0)});
  prim("square", projected([](Tape& t, auto in) { return t.square(in[0]); }, w({3, 4})), {w({3, 4})});
  {
    // Entries on both sides of the bounds, none within 0.02 of them.
    Tensor x = away_from_zero(rng, {3, 4}, 0.05, 1.0);
    for (auto& v : x.data()) {
      if (std::abs(std::abs(v) - 0.4) < 0.02) v *= 1.2;
    }
    prim("clamp", projected([](Tape& t, auto in) { return t.clamp(in[0], -0.4, 0.4); }, w({3, 4})), {x});
  }
  prim("sum", [](Tape& t, std::span<const Var> in) { return t.sum(in[0]); }, {w({3, 4})});
  prim("l2_normalize_rows", projected([](Tape& t, auto in) { return t.l2_normalize_rows(in[0]); }, w({3, 4})),
       {w({3, 4})});
  {
    const std::vector<int> labels{2, 0, 3};
    prim("softmax_cross_entropy",
         [labels](Tape& t, std::span<const Var> in) { return t.softmax_cross_entropy(in[0], labels); },
         {random_tensor(rng, {3, 5}, -3.0, 3.0)});
  }

  // Margin loss, one check per parameter group.
  {
    const BackboneSpec spec = small_spec();
    const MarginSpec margin;
    const BackboneParams bb = init_backbone(spec, rng.next_u64());
    const HeadParams head = init_head(4, spec.embedding_dim, rng.next_u64());
    const Tensor x = random_tensor(rng, {3, spec.input_dim}, 0.0, 255.0);
    const std::vector<int> labels{1, 3, 0};

    suite.composed.push_back(check_gradient(
        "arcface_loss d/dx",
        [&](Tape& t, std::span<const Var> in) {
          return arcface_loss(t, bind_constant(t, bb), t.borrow(head.weight), in[0], labels, margin);
        },
        {x}, kComposedTol, opt));

    std::vector<Tensor> params;
    for (std::size_t l = 0; l < bb.weights.size(); ++l) {
      params.push_back(bb.weights[l]);
      params.push_back(bb.biases[l]);
    }
    suite.composed.push_back(check_gradient(
        "arcface_loss d/dbackbone",
        [&](Tape& t, std::span<const Var> in) {
          BoundBackbone b;
          for (std::size_t l = 0; l < bb.weights.size(); ++l) {
            b.weights.push_back(in[2 * l]);
            b.biases.push_back(in[2 * l + 1]);
          }
          return arcface_loss(t, b, t.borrow(head.weight), t.borrow(x), labels, margin);
        },
        params, kComposedTol, opt));

    suite.composed.push_back(check_gradient(
        "arcface_loss d/dhead",
        [&](Tape& t, std::span<const Var> in) {
          return arcface_loss(t, bind_constant(t, bb), in[0], t.borrow(x), labels, margin);
        },
        {head.weight}, kComposedTol, opt));
  }

  aggregate_checks(rng, LossNorm::kSquared, suite.composed, opt);
  aggregate_checks(rng, LossNorm::kPlain, suite.composed, opt);
  return suite;
}

GradcheckResult corrupted_rule_control(std::uint64_t seed) {
  Rng rng(seed);
  const Tensor x = random_tensor(rng, {2, 3}, 0.5, 1.5);
  const Tensor w = random_tensor(rng, {2, 3}, -1.0, 1.0);
  auto build = [&](Tape& t, std::span<const Var> in) {
    const Tensor& v = t.value(in[0]);
    Tensor out(v.shape());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] * v[k];
    const Var sq = t.custom({in[0]}, std::move(out),
                            [](const Tensor& g, std::span<const Tensor* const> inputs, const Tensor&) {
                              Tensor d(g.shape());
                              for (std::size_t k = 0; k < g.size(); ++k) d[k] = g[k] * (*inputs[0])[k];
                              return std::vector<Tensor>{d};
                            });
    return t.sum(t.hadamard(t.borrow(w), sq));
  };
  return check_gradient("corrupted square", build, {x}, kPrimitiveTol);
}

}  // namespace dpa
