#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpa/model.hpp"
#include "dpa/tape.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class LossNorm { kSquared, kPlain };
enum class InputTransform { kIdentity };

LossNorm parse_loss_norm(const std::string& s);
std::string to_string(LossNorm n);
InputTransform parse_transform(const std::string& s);
std::string to_string(InputTransform t);

struct AttackConfig {
  double epsilon = 10.0;  // L-inf budget, pixel units
  double step = 1.0;      // sign-descent step
  double eta = 8e-4;      // beneficial perturbation step on feature maps
  int iterations = 200;
  std::vector<int> hooks{1, 2};
  InputTransform transform = InputTransform::kIdentity;
  LossNorm norm = LossNorm::kSquared;
  std::uint64_t seed = 0;

  void validate(const BackboneSpec& backbone) const;
  nlohmann::json to_json() const;
};

/// Per-model, per-hook signs of the previous iteration's feature-map
/// gradients. Empty before the first refresh (iteration 1).
class HardState {
 public:
  explicit HardState(std::size_t models) : buffers_(models) {}

  bool primed() const { return primed_; }
  std::size_t models() const { return buffers_.size(); }
  const std::vector<Tensor>& buffers(std::size_t model) const { return buffers_.at(model); }
  /// Replace model `model`'s buffers with sign(gradients).
  void refresh(std::size_t model, std::span<const Tensor> gradients);
  void mark_primed() { primed_ = true; }

 private:
  std::vector<std::vector<Tensor>> buffers_;
  bool primed_ = false;
};

struct AttackTrace {
  std::vector<double> losses;            // aggregated loss at each iteration
  std::vector<double> max_perturbation;  // ||x_adv_t - x_s||_inf after each step
  std::vector<double> min_pixel;         // pixel range of x_adv_t after each step
  std::vector<double> max_pixel;
  Tensor adversarial;
  bool completed = true;
  std::string error;
};

/// Unit-norm embeddings of the target under each model, computed once.
std::vector<Tensor> target_embeddings(std::span<const BackboneParams> models, const Tensor& x_target);

Var input_transform(Tape& tape, InputTransform t, Var x);

struct HardForward {
  Var embedding;
  std::vector<Var> hooks;  // post-perturbation feature maps, one per hook
};

/// Segment-by-segment forward through the hook layers. For t > 1 each hook
/// feature map is shifted by eta * buffer before feeding the next segment.
/// `buffers` must be empty at t = 1 and hold one tensor per hook otherwise.
HardForward hard_forward(Tape& tape, const BoundBackbone& model, Var x, std::span<const Tensor> buffers, int t,
                         const AttackConfig& config);

struct AggregateLoss {
  Var loss;
  std::vector<std::vector<Var>> hooks;  // per model; empty for vanilla models
};

/// Mean over models of ||phi(H_i(T(x))) - target_i|| (squared or plain).
/// `state == nullptr` evaluates vanilla models with no feature-map hooks.
AggregateLoss aggregate_loss(Tape& tape, std::span<const BoundBackbone> models, Var x_adv,
                             std::span<const Tensor> targets, const HardState* state, int t,
                             const AttackConfig& config);

/// clip_box(x - step * sign(grad), x_s, eps, 0, 255).
Tensor attack_step(const Tensor& x_prev, const Tensor& grad, const Tensor& x_source, const AttackConfig& config);

/// Hard model aggregation attack.
AttackTrace craft(const Tensor& x_source, const Tensor& x_target, std::span<const BackboneParams> models,
                  const AttackConfig& config);

/// Vanilla ensemble baseline: same loop with no feature-map perturbation.
AttackTrace craft_dma(const Tensor& x_source, const Tensor& x_target, std::span<const BackboneParams> models,
                      const AttackConfig& config);

/// JSON export: config echo, per-iteration losses, base64 payload of the
/// final example with its shape, and constraint-audit fields.
nlohmann::json trace_to_json(const AttackTrace& trace, const AttackConfig& config, const Tensor& x_source);
Tensor adversarial_from_json(const nlohmann::json& j);

}  // namespace dpa
