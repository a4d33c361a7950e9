#include "dpa/hma.hpp"

#include <algorithm>
#include <cmath>

#include "dpa/container.hpp"
#include "dpa/errors.hpp"

namespace dpa {

LossNorm parse_loss_norm(const std::string& s) {
  if (s == "squared") return LossNorm::kSquared;
  if (s == "plain") return LossNorm::kPlain;
  throw ValueError("unknown loss norm '" + s + "' (expected squared|plain)");
}

std::string to_string(LossNorm n) { return n == LossNorm::kSquared ? "squared" : "plain"; }

InputTransform parse_transform(const std::string& s) {
  if (s == "identity") return InputTransform::kIdentity;
  throw ValueError("unknown input transform '" + s + "'");
}

std::string to_string(InputTransform) { return "identity"; }

void AttackConfig::validate(const BackboneSpec& backbone) const {
  if (!(epsilon >= 0.0)) throw ValueError("attack: epsilon must be >= 0");
  if (!(step > 0.0)) throw ValueError("attack: step must be > 0");
  if (!(eta >= 0.0)) throw ValueError("attack: eta must be >= 0");
  if (iterations < 1) throw ValueError("attack: iterations must be >= 1");
  int prev = 0;
  for (int h : hooks) {
    if (h <= prev) throw ValueError("attack: hooks must be strictly increasing");
    if (std::find(backbone.hook_layers.begin(), backbone.hook_layers.end(), h) == backbone.hook_layers.end()) {
      throw ValueError("attack: hook " + std::to_string(h) + " is not a hookable backbone layer");
    }
    prev = h;
  }
}

nlohmann::json AttackConfig::to_json() const {
  return {{"epsilon", epsilon},  {"step", step},          {"eta", eta},
          {"iterations", iterations}, {"hooks", hooks},   {"transform", to_string(transform)},
          {"norm", to_string(norm)},  {"seed", seed}};
}

void HardState::refresh(std::size_t model, std::span<const Tensor> gradients) {
  auto& buf = buffers_.at(model);
  if (!buf.empty() && buf.size() != gradients.size()) throw DimensionError("hard state: hook count changed");
  std::vector<Tensor> next;
  for (std::size_t j = 0; j < gradients.size(); ++j) {
    if (!buf.empty() && buf[j].shape() != gradients[j].shape()) {
      throw DimensionError("hard state: feature map shape drifted at hook " + std::to_string(j));
    }
    next.push_back(sign(gradients[j]));
  }
  buf = std::move(next);
}

std::vector<Tensor> target_embeddings(std::span<const BackboneParams> models, const Tensor& x_target) {
  if (models.empty()) throw ValueError("target_embeddings: no models");
  std::vector<Tensor> out;
  for (const auto& params : models) {
    Tape tape;
    const BoundBackbone b = bind_constant(tape, params);
    const Var e = embed(tape, b, tape.borrow(x_target)).embedding;
    out.push_back(tape.value(tape.l2_normalize_rows(e)));
  }
  return out;
}

Var input_transform(Tape&, InputTransform t, Var x) {
  switch (t) {
    case InputTransform::kIdentity:
      return x;
  }
  throw ValueError("unknown input transform");
}

HardForward hard_forward(Tape& tape, const BoundBackbone& model, Var x, std::span<const Tensor> buffers, int t,
                         const AttackConfig& config) {
  if (t < 1) throw ValueError("hard_forward: iteration index starts at 1");
  const bool perturb = t > 1;
  if (perturb && buffers.size() != config.hooks.size()) {
    throw ValueError("hard_forward: missing beneficial-perturbation buffers at iteration " + std::to_string(t));
  }
  if (!perturb && !buffers.empty()) throw ValueError("hard_forward: buffers must be empty at iteration 1");

  HardForward out;
  Var omega = x;
  int start = 1;  // segment boundaries restart for every model and iteration
  for (std::size_t j = 0; j < config.hooks.size(); ++j) {
    const int stop = config.hooks[j];
    omega = forward_segment(tape, model, start, stop, omega);
    if (perturb) {
      const Tensor& buf = buffers[j];
      if (buf.shape() != tape.value(omega).shape()) {
        throw DimensionError("hard_forward: buffer " + shape_str(buf.shape()) + " does not match feature map " +
                             shape_str(tape.value(omega).shape()));
      }
      Tensor shift(buf.shape());
      for (std::size_t k = 0; k < buf.size(); ++k) shift[k] = config.eta * buf[k];
      omega = tape.add(omega, tape.constant(std::move(shift)));
    }
    out.hooks.push_back(omega);
    start = stop + 1;
  }
  out.embedding = start <= model.layer_count() ? forward_segment(tape, model, start, model.layer_count(), omega) : omega;
  return out;
}

AggregateLoss aggregate_loss(Tape& tape, std::span<const BoundBackbone> models, Var x_adv,
                             std::span<const Tensor> targets, const HardState* state, int t,
                             const AttackConfig& config) {
  if (models.empty()) throw ValueError("aggregate_loss: no models");
  if (targets.size() != models.size()) throw DimensionError("aggregate_loss: one target per model required");
  if (state && state->models() != models.size()) throw DimensionError("aggregate_loss: hard state model count");
  if (state && state->primed() != (t > 1)) {
    throw ValueError("aggregate_loss: hard state must be primed exactly when t > 1");
  }

  const Var input = input_transform(tape, config.transform, x_adv);
  AggregateLoss out;
  Var total;
  for (std::size_t i = 0; i < models.size(); ++i) {
    Var e;
    if (state) {
      const std::span<const Tensor> bufs =
          state->primed() ? std::span<const Tensor>(state->buffers(i)) : std::span<const Tensor>();
      HardForward hf = hard_forward(tape, models[i], input, bufs, t, config);
      e = hf.embedding;
      out.hooks.push_back(std::move(hf.hooks));
    } else {
      e = embed(tape, models[i], input).embedding;
      out.hooks.emplace_back();
    }
    const Var diff = tape.sub(tape.l2_normalize_rows(e), tape.borrow(targets[i]));
    Var term = tape.sum(tape.square(diff));
    if (config.norm == LossNorm::kPlain) term = tape.sqrt_clamped(term);
    total = i == 0 ? term : tape.add(total, term);
  }
  out.loss = tape.scale(total, 1.0 / static_cast<double>(models.size()));
  return out;
}

Tensor attack_step(const Tensor& x_prev, const Tensor& grad, const Tensor& x_source, const AttackConfig& config) {
  if (x_prev.shape() != grad.shape() || x_prev.shape() != x_source.shape()) {
    throw DimensionError("attack_step: shape mismatch");
  }
  const Tensor s = sign(grad);
  Tensor moved(x_prev.shape());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = x_prev[i] - config.step * s[i];
  return clip_box(moved, x_source, config.epsilon, 0.0, 255.0);
}

namespace {

AttackTrace run_attack(const Tensor& x_source, const Tensor& x_target, std::span<const BackboneParams> models,
                       const AttackConfig& config, bool hard) {
  if (models.empty()) throw ValueError("craft: no surrogate models");
  if (x_source.shape() != x_target.shape()) throw DimensionError("craft: source and target shapes differ");
  for (double v : x_source.data()) {
    if (!(v >= 0.0 && v <= 255.0)) throw ValueError("craft: source pixels must lie in [0, 255]");
  }
  const std::vector<Tensor> targets = target_embeddings(models, x_target);
  HardState state(models.size());
  AttackTrace trace;
  Tensor x = x_source;
  for (int t = 1; t <= config.iterations; ++t) {
    try {
      Tape tape;
      std::vector<BoundBackbone> bound;
      bound.reserve(models.size());
      for (const auto& p : models) bound.push_back(bind_constant(tape, p));
      const Var xv = tape.leaf(x);
      AggregateLoss agg = aggregate_loss(tape, bound, xv, targets, hard ? &state : nullptr, t, config);

      std::vector<Var> requested{xv};
      for (const auto& hooks : agg.hooks) requested.insert(requested.end(), hooks.begin(), hooks.end());
      const GradientMap grads = tape.backward(agg.loss, requested);

      if (hard) {
        for (std::size_t i = 0; i < models.size(); ++i) {
          std::vector<Tensor> g;
          for (Var h : agg.hooks[i]) g.push_back(grads.at(h));
          state.refresh(i, g);
        }
        state.mark_primed();
      }
      x = attack_step(x, grads.at(xv), x_source, config);
      trace.losses.push_back(tape.value(agg.loss).item());
      trace.max_perturbation.push_back(linf_distance(x, x_source));
      const auto [lo, hi] = std::ranges::minmax(x.data());
      trace.min_pixel.push_back(lo);
      trace.max_pixel.push_back(hi);
    } catch (const NumericError& e) {
      trace.completed = false;
      trace.error = "iteration " + std::to_string(t) + ": " + e.what();
      break;
    }
  }
  trace.adversarial = std::move(x);
  return trace;
}

}  // namespace

AttackTrace craft(const Tensor& x_source, const Tensor& x_target, std::span<const BackboneParams> models,
                  const AttackConfig& config) {
  return run_attack(x_source, x_target, models, config, true);
}

AttackTrace craft_dma(const Tensor& x_source, const Tensor& x_target, std::span<const BackboneParams> models,
                      const AttackConfig& config) {
  AttackConfig vanilla = config;
  vanilla.eta = 0.0;
  return run_attack(x_source, x_target, models, vanilla, false);
}

nlohmann::json trace_to_json(const AttackTrace& trace, const AttackConfig& config, const Tensor& x_source) {
  double max_linf = 0.0, min_pixel = 255.0, max_pixel = 0.0;
  std::size_t violations = 0;
  for (double m : trace.max_perturbation) {
    max_linf = std::max(max_linf, m);
    if (m > config.epsilon) ++violations;
  }
  for (std::size_t t = 0; t < trace.min_pixel.size(); ++t) {
    min_pixel = std::min(min_pixel, trace.min_pixel[t]);
    max_pixel = std::max(max_pixel, trace.max_pixel[t]);
    if (trace.min_pixel[t] < 0.0 || trace.max_pixel[t] > 255.0) ++violations;
  }
  return {{"config", config.to_json()},
          {"completed", trace.completed},
          {"error", trace.error},
          {"losses", trace.losses},
          {"max_perturbation", trace.max_perturbation},
          {"adversarial", {{"shape", trace.adversarial.shape()}, {"base64", base64_encode(tensor_bytes(trace.adversarial))}}},
          {"audit",
           {{"epsilon", config.epsilon},
            {"max_linf", max_linf},
            {"final_linf", linf_distance(trace.adversarial, x_source)},
            {"min_pixel", min_pixel},
            {"max_pixel", max_pixel},
            {"violations", violations}}}};
}

Tensor adversarial_from_json(const nlohmann::json& j) {
  const auto& adv = j.at("adversarial");
  const Shape shape = adv.at("shape").get<Shape>();
  return tensor_from_bytes(shape, base64_decode(adv.at("base64").get<std::string>()));
}

}  // namespace dpa
