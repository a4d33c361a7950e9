#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;

  bool valid() const { return id != kNone; }
  friend bool operator==(Var, Var) = default;
};

/// Gradients keyed by node; each entry has the shape of the node's value.
class GradientMap {
 public:
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  const Tensor& at(Var v) const;
  void insert(Var v, Tensor g) { grads_.insert_or_assign(v.id, std::move(g)); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint32_t, Tensor> grads_;
};

/// Backward rule for Tape::custom. Receives the upstream gradient, the input
/// values and the output value; returns one gradient per input.
using BackwardRule = std::function<std::vector<Tensor>(const Tensor& grad_out,
                                                       std::span<const Tensor* const> inputs,
                                                       const Tensor& output)>;

/// Reverse-mode computation record. Nodes are appended in evaluation order,
/// so the node list is always topologically sorted. Single-threaded; use one
/// tape per thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Constant whose storage stays with the caller; `value` must outlive the tape.
  Var borrow(const Tensor& value);
  /// Differentiable input.
  Var leaf(Tensor value);

  const Tensor& value(Var v) const;
  bool is_leaf(Var v) const;
  std::size_t size() const;

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var scale(Var a, double k);
  Var add_scalar(Var a, double k);
  /// a[b x k] + row[k], broadcast over rows.
  Var add_row(Var a, Var row);
  Var relu(Var a);
  /// sqrt(max(x, 0)); zero gradient where x <= 0.
  Var sqrt_clamped(Var a);
  Var square(Var a);
  /// Gradient passes where lo <= x <= hi.
  Var clamp(Var a, double lo, double hi);
  Var sum(Var a);
  Var l2_normalize_rows(Var a);
  /// Mean over rows of -log softmax(logits)[label].
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);
  Var custom(std::vector<Var> inputs, Tensor value, BackwardRule rule);

  /// Gradients of the scalar `loss` with respect to every requested node,
  /// leaf or intermediate. Requested nodes that do not influence the loss
  /// get zeros.
  GradientMap backward(Var loss, std::span<const Var> requested) const;
  GradientMap backward(Var loss, std::initializer_list<Var> requested) const {
    return backward(loss, std::span<const Var>(requested.begin(), requested.size()));
  }

 private:
  struct Node;
  Var push(Node node);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

}  // namespace dpa
