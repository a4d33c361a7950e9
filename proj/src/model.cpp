#include "dpa/model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dpa/errors.hpp"
#include "dpa/rng.hpp"

namespace dpa {

namespace {

constexpr double kPixelScale = 1.0 / 255.0;
constexpr double kPixelCenter = 0.5;

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(seed);
  Tensor w(Shape{fan_in, fan_out});
  for (auto& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

}  // namespace

std::size_t BackboneSpec::layer_input_dim(int layer) const {
  if (layer < 1 || layer > layer_count()) throw ValueError("layer index out of range: " + std::to_string(layer));
  return layer == 1 ? input_dim : hidden_widths[static_cast<std::size_t>(layer - 2)];
}

std::size_t BackboneSpec::layer_output_dim(int layer) const {
  if (layer < 1 || layer > layer_count()) throw ValueError("layer index out of range: " + std::to_string(layer));
  return layer == layer_count() ? embedding_dim : hidden_widths[static_cast<std::size_t>(layer - 1)];
}

void BackboneSpec::validate() const {
  if (input_dim == 0) throw ValueError("backbone: input_dim must be positive");
  for (auto w : hidden_widths) {
    if (w == 0) throw ValueError("backbone: hidden widths must be positive");
  }
  if (embedding_dim < 2) throw ValueError("backbone: embedding_dim must be >= 2");
  int prev = 0;
  for (int h : hook_layers) {
    if (h <= prev) throw ValueError("backbone: hook layers must be strictly increasing and >= 1");
    if (h > static_cast<int>(hidden_widths.size())) {
      throw ValueError("backbone: hook layer " + std::to_string(h) + " is not a hidden layer");
    }
    prev = h;
  }
}

bool BackboneParams::matches(const BackboneSpec& spec) const {
  if (layer_count() != spec.layer_count() || biases.size() != weights.size()) return false;
  for (int l = 1; l <= spec.layer_count(); ++l) {
    const auto i = static_cast<std::size_t>(l - 1);
    if (weights[i].shape() != Shape{spec.layer_input_dim(l), spec.layer_output_dim(l)}) return false;
    if (biases[i].shape() != Shape{spec.layer_output_dim(l)}) return false;
  }
  return true;
}

bool bitwise_equal(const BackboneParams& a, const BackboneParams& b) {
  if (a.weights.size() != b.weights.size() || a.biases.size() != b.biases.size()) return false;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    if (!bitwise_equal(a.weights[i], b.weights[i]) || !bitwise_equal(a.biases[i], b.biases[i])) return false;
  }
  return true;
}

void MarginSpec::validate() const {
  if (!(scale > 0.0)) throw ValueError("margin head: scale must be positive");
  if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) throw ValueError("margin head: margin must lie in [0, pi/2)");
}

BackboneParams init_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  BackboneParams p;
  for (int l = 1; l <= spec.layer_count(); ++l) {
    const auto in = spec.layer_input_dim(l);
    const auto out = spec.layer_output_dim(l);
    p.weights.push_back(xavier_uniform(in, out, derive_seed(seed, 0xB0, static_cast<std::uint64_t>(l))));
    p.biases.emplace_back(Shape{out}, 0.0);
  }
  return p;
}

HeadParams init_head(std::size_t classes, std::size_t embedding_dim, std::uint64_t seed) {
  if (classes == 0 || embedding_dim == 0) throw ValueError("head: sizes must be positive");
  // Same fan-based bound as the backbone, laid out one row per class.
  Tensor w = xavier_uniform(classes, embedding_dim, derive_seed(seed, 0xEAD));
  return HeadParams{std::move(w)};
}

BoundBackbone bind_constant(Tape& tape, const BackboneParams& params) {
  BoundBackbone b;
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    b.weights.push_back(tape.borrow(params.weights[i]));
    b.biases.push_back(tape.borrow(params.biases[i]));
  }
  return b;
}

BoundBackbone bind_trainable(Tape& tape, const BackboneParams& params) {
  BoundBackbone b;
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    b.weights.push_back(tape.leaf(params.weights[i]));
    b.biases.push_back(tape.leaf(params.biases[i]));
  }
  return b;
}

Var forward_segment(Tape& tape, const BoundBackbone& model, int from, int to, Var input) {
  const int z = model.layer_count();
  if (from < 1 || to > z || from > to) {
    throw ValueError("forward_segment: invalid range [" + std::to_string(from) + ", " + std::to_string(to) +
                     "] for " + std::to_string(z) + " layers");
  }
  const std::size_t expected = tape.value(model.weights[static_cast<std::size_t>(from - 1)]).rows();
  if (tape.value(input).rank() != 2 || tape.value(input).cols() != expected) {
    throw DimensionError("forward_segment: input " + shape_str(tape.value(input).shape()) + " does not feed layer " +
                         std::to_string(from) + " (expects " + std::to_string(expected) + " columns)");
  }
  Var h = input;
  for (int l = from; l <= to; ++l) {
    const auto i = static_cast<std::size_t>(l - 1);
    if (l == 1) h = tape.add_scalar(tape.scale(h, kPixelScale), -kPixelCenter);
    h = tape.add_row(tape.matmul(h, model.weights[i]), model.biases[i]);
    if (l < z) h = tape.relu(h);
  }
  return h;
}

EmbedResult embed(Tape& tape, const BoundBackbone& model, Var x, std::span<const int> hook_layers) {
  EmbedResult r;
  int start = 1;
  Var h = x;
  for (int hook : hook_layers) {
    h = forward_segment(tape, model, start, hook, h);
    r.hooks.push_back(h);
    start = hook + 1;
  }
  r.embedding = start <= model.layer_count() ? forward_segment(tape, model, start, model.layer_count(), h) : h;
  return r;
}

Tensor embed_values(const BackboneParams& params, const Tensor& x) {
  Tape tape;
  const BoundBackbone b = bind_constant(tape, params);
  const Var in = tape.borrow(x);
  return tape.value(embed(tape, b, in).embedding);
}

Var cosine_matrix(Tape& tape, Var embeddings, Var head_weight) {
  const Tensor& e = tape.value(embeddings);
  const Tensor& w = tape.value(head_weight);
  if (e.rank() != 2 || w.rank() != 2 || e.cols() != w.cols()) {
    throw DimensionError("cosine_matrix: embeddings " + shape_str(e.shape()) + " vs head " + shape_str(w.shape()));
  }
  return tape.matmul(tape.l2_normalize_rows(embeddings), tape.transpose(tape.l2_normalize_rows(head_weight)));
}

Var margin_logits(Tape& tape, Var cosines, std::span<const int> labels, const MarginSpec& spec) {
  spec.validate();
  const Tensor& raw = tape.value(cosines);
  if (raw.rank() != 2) throw DimensionError("margin_logits: expected [b x s], got " + shape_str(raw.shape()));
  const std::size_t b = raw.rows();
  const std::size_t s = raw.cols();
  if (labels.size() != b) throw DimensionError("margin_logits: label count does not match batch");

  const double m = spec.margin;
  const Var cos_a = tape.clamp(cosines, -1.0, 1.0);
  const Var sin_a = tape.sqrt_clamped(tape.add_scalar(tape.scale(tape.square(cos_a), -1.0), 1.0));
  const Var cos_am = tape.sub(tape.scale(cos_a, std::cos(m)), tape.scale(sin_a, std::sin(m)));
  const Var fallback = tape.add_scalar(cos_a, -m * std::sin(m));

  const double boundary = std::cos(std::numbers::pi - m);
  const Tensor& cv = tape.value(cos_a);
  Tensor branch(cv.shape()), branch_c(cv.shape()), onehot(cv.shape()), onehot_c(cv.shape(), 1.0);
  for (std::size_t i = 0; i < cv.size(); ++i) {
    branch[i] = cv[i] > boundary ? 1.0 : 0.0;
    branch_c[i] = 1.0 - branch[i];
  }
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= s) {
      throw ValueError("margin_logits: label " + std::to_string(y) + " outside [0, " + std::to_string(s) + ")");
    }
    onehot[i * s + static_cast<std::size_t>(y)] = 1.0;
    onehot_c[i * s + static_cast<std::size_t>(y)] = 0.0;
  }
  const Var p = tape.add(tape.hadamard(tape.constant(std::move(branch)), cos_am),
                         tape.hadamard(tape.constant(std::move(branch_c)), fallback));
  const Var mixed = tape.add(tape.hadamard(tape.constant(std::move(onehot)), p),
                             tape.hadamard(tape.constant(std::move(onehot_c)), cos_a));
  return tape.scale(mixed, spec.scale);
}

Var arcface_loss(Tape& tape, const BoundBackbone& model, Var head_weight, Var x, std::span<const int> labels,
                 const MarginSpec& spec) {
  const Var e = embed(tape, model, x).embedding;
  const Var cosines = cosine_matrix(tape, e, head_weight);
  return tape.softmax_cross_entropy(margin_logits(tape, cosines, labels, spec), labels);
}

}  // namespace dpa
