#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpa/tape.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class Activation { kRelu };

/// Fully connected embedding network. Layers are numbered 1..z where
/// z = hidden_widths.size() + 1; layers 1..z-1 are hidden (affine + relu),
/// layer z is the affine embedding projection.
struct BackboneSpec {
  std::size_t input_dim = 256;
  std::vector<std::size_t> hidden_widths{128, 128};
  std::size_t embedding_dim = 32;
  Activation activation = Activation::kRelu;
  /// 1-based hidden-layer indices whose outputs are hookable feature maps.
  std::vector<int> hook_layers{1, 2};

  int layer_count() const { return static_cast<int>(hidden_widths.size()) + 1; }
  std::size_t layer_input_dim(int layer) const;
  std::size_t layer_output_dim(int layer) const;
  void validate() const;
};

struct BackboneParams {
  std::vector<Tensor> weights;  // layer i (0-based here): [in x out]
  std::vector<Tensor> biases;   // [out]

  int layer_count() const { return static_cast<int>(weights.size()); }
  bool matches(const BackboneSpec& spec) const;
};

bool bitwise_equal(const BackboneParams& a, const BackboneParams& b);

/// Margin head weights, one row per class: [s x r].
struct HeadParams {
  Tensor weight;
};

struct MarginSpec {
  double scale = 32.0;
  double margin = 0.5;

  /// scale > 0 and 0 <= margin < pi/2 (margin 0 is the margin-free case).
  void validate() const;
};

/// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases.
BackboneParams init_backbone(const BackboneSpec& spec, std::uint64_t seed);
HeadParams init_head(std::size_t classes, std::size_t embedding_dim, std::uint64_t seed);

/// Backbone parameters placed on a tape.
struct BoundBackbone {
  std::vector<Var> weights;
  std::vector<Var> biases;

  int layer_count() const { return static_cast<int>(weights.size()); }
};

/// Borrowed constants; `params` must outlive the tape.
BoundBackbone bind_constant(Tape& tape, const BackboneParams& params);
/// Copies as differentiable leaves.
BoundBackbone bind_trainable(Tape& tape, const BackboneParams& params);

/// Applies layers from..to inclusive (1-based). Layer 1 first maps the pixel
/// input from [0, 255] to [-0.5, 0.5].
Var forward_segment(Tape& tape, const BoundBackbone& model, int from, int to, Var input);

struct EmbedResult {
  Var embedding;
  std::vector<Var> hooks;  // one per requested hook layer, in order
};

EmbedResult embed(Tape& tape, const BoundBackbone& model, Var x, std::span<const int> hook_layers = {});

/// Embeddings of a batch of pixel rows without keeping a tape around.
Tensor embed_values(const BackboneParams& params, const Tensor& x);

/// Row-normalized e times row-normalized w, transposed: [b x s].
Var cosine_matrix(Tape& tape, Var embeddings, Var head_weight);

/// Margin head output q = d (h * p + (1 - h) * cos), with
/// p = cos(a + m) when a < pi - m and cos(a) - m sin(m) otherwise.
/// The branch test uses cos(a) > cos(pi - m), so no arccos is taken.
Var margin_logits(Tape& tape, Var cosines, std::span<const int> labels, const MarginSpec& spec);

Var arcface_loss(Tape& tape, const BoundBackbone& model, Var head_weight, Var x, std::span<const int> labels,
                 const MarginSpec& spec);

}  // namespace dpa
