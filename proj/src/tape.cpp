#include "dpa/tape.hpp"

#include <algorithm>
#include <cmath>

#include "dpa/errors.hpp"

namespace dpa {

namespace {

enum class Op {
  kConstant,
  kLeaf,
  kMatmul,
  kTranspose,
  kAdd,
  kSub,
  kHadamard,
  kScale,
  kAddScalar,
  kAddRow,
  kRelu,
  kSqrtClamped,
  kSquare,
  kClamp,
  kSum,
  kL2NormalizeRows,
  kSoftmaxCrossEntropy,
  kCustom,
};

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kHadamard: return "hadamard";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kAddRow: return "add_row";
    case Op::kRelu: return "relu";
    case Op::kSqrtClamped: return "sqrt_clamped";
    case Op::kSquare: return "square";
    case Op::kClamp: return "clamp";
    case Op::kSum: return "sum";
    case Op::kL2NormalizeRows: return "l2_normalize_rows";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kCustom: return "custom";
  }
  return "?";
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// C[b x s] += A[b x k] * B[k x s]
void gemm_nn(const double* a, const double* b, double* c, std::size_t rows, std::size_t inner, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    double* crow = c + i * cols;
    for (std::size_t p = 0; p < inner; ++p) {
      const double av = a[i * inner + p];
      if (av == 0.0) continue;
      const double* brow = b + p * cols;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

struct Tape::Node {
  Op op = Op::kConstant;
  std::vector<std::uint32_t> inputs;
  Tensor value;
  const Tensor* borrowed = nullptr;
  double p0 = 0.0;
  double p1 = 0.0;
  Tensor saved;
  std::vector<int> labels;
  std::shared_ptr<BackwardRule> rule;

  const Tensor& val() const { return borrowed ? *borrowed : value; }
};

const Tensor& GradientMap::at(Var v) const {
  auto it = grads_.find(v.id);
  if (it == grads_.end()) throw ValueError("no gradient recorded for node " + std::to_string(v.id));
  return it->second;
}

Tape::Tape() = default;
Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

Var Tape::push(Node n) {
  if (!n.val().all_finite()) {
    throw NumericError(std::string(op_name(n.op)) + ": non-finite value at node " + std::to_string(nodes_.size()));
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ValueError("invalid node handle " + std::to_string(v.id));
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).val(); }
bool Tape::is_leaf(Var v) const { return node(v).op == Op::kLeaf; }
std::size_t Tape::size() const { return nodes_.size(); }

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::borrow(const Tensor& value) {
  Node n;
  n.op = Op::kConstant;
  n.borrowed = &value;
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  n.value = Tensor(Shape{av.rows(), bv.cols()});
  gemm_nn(av.data().data(), bv.data().data(), n.value.data().data(), av.rows(), av.cols(), bv.cols());
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  const Tensor& av = value(a);
  require_matrix(av, "transpose");
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a.id};
  n.value = Tensor(Shape{av.cols(), av.rows()});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) n.value.at(j, i) = av.at(i, j);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same_shape(av, bv, "add");
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i];
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same_shape(av, bv, "sub");
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] - bv[i];
  return push(std::move(n));
}

Var Tape::hadamard(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same_shape(av, bv, "hadamard");
  Node n;
  n.op = Op::kHadamard;
  n.inputs = {a.id, b.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * bv[i];
  return push(std::move(n));
}

Var Tape::scale(Var a, double k) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id};
  n.p0 = k;
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * k;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double k) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kAddScalar;
  n.inputs = {a.id};
  n.p0 = k;
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + k;
  return push(std::move(n));
}

Var Tape::add_row(Var a, Var row) {
  const Tensor& av = value(a);
  const Tensor& rv = value(row);
  require_matrix(av, "add_row");
  if (rv.size() != av.cols()) {
    throw DimensionError("add_row: row " + shape_str(rv.shape()) + " does not fit " + shape_str(av.shape()));
  }
  Node n;
  n.op = Op::kAddRow;
  n.inputs = {a.id, row.id};
  n.value = Tensor(av.shape());
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) n.value[i * c + j] = av[i * c + j] + rv[j];
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kRelu;
  n.inputs = {a.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] > 0.0 ? av[i] : 0.0;
  return push(std::move(n));
}

Var Tape::sqrt_clamped(Var a) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kSqrtClamped;
  n.inputs = {a.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] > 0.0 ? std::sqrt(av[i]) : 0.0;
  return push(std::move(n));
}

Var Tape::square(Var a) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kSquare;
  n.inputs = {a.id};
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * av[i];
  return push(std::move(n));
}

Var Tape::clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo must be <= hi");
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kClamp;
  n.inputs = {a.id};
  n.p0 = lo;
  n.p1 = hi;
  n.value = Tensor(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = std::min(std::max(av[i], lo), hi);
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  const Tensor& av = value(a);
  Node n;
  n.op = Op::kSum;
  n.inputs = {a.id};
  double s = 0.0;
  for (double v : av.data()) s += v;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Var Tape::l2_normalize_rows(Var a) {
  const Tensor& av = value(a);
  require_matrix(av, "l2_normalize_rows");
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  Node n;
  n.op = Op::kL2NormalizeRows;
  n.inputs = {a.id};
  n.value = Tensor(av.shape());
  n.saved = Tensor(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += av[i * c + j] * av[i * c + j];
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-12)) {
      throw DegenerateEmbeddingError("l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                                     std::to_string(norm));
    }
    n.saved[i] = norm;
    for (std::size_t j = 0; j < c; ++j) n.value[i * c + j] = av[i * c + j] / norm;
  }
  return push(std::move(n));
}

Var Tape::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& q = value(logits);
  require_matrix(q, "softmax_cross_entropy");
  const std::size_t b = q.rows();
  const std::size_t s = q.cols();
  if (labels.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  Node n;
  n.op = Op::kSoftmaxCrossEntropy;
  n.inputs = {logits.id};
  n.labels.assign(labels.begin(), labels.end());
  n.saved = Tensor(q.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= s) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(s) + ")");
    }
    const double* row = q.data().data() + i * s;
    const double mx = *std::max_element(row, row + s);
    double z = 0.0;
    for (std::size_t j = 0; j < s; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < s; ++j) n.saved[i * s + j] = std::exp(row[j] - mx) / z;
    total += std::log(z) - (row[y] - mx);
  }
  n.value = Tensor::scalar(total / static_cast<double>(b));
  return push(std::move(n));
}

Var Tape::custom(std::vector<Var> inputs, Tensor value, BackwardRule rule) {
  Node n;
  n.op = Op::kCustom;
  for (Var v : inputs) {
    node(v);
    n.inputs.push_back(v.id);
  }
  n.value = std::move(value);
  n.rule = std::make_shared<BackwardRule>(std::move(rule));
  return push(std::move(n));
}

GradientMap Tape::backward(Var loss, std::span<const Var> requested) const {
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(lv.shape()));

  const std::size_t count = loss.id + 1;
  // A node needs a gradient if it is a leaf, was requested, or depends on one.
  std::vector<char> needs(count, 0);
  for (Var v : requested) {
    node(v);
    if (v.id < count) needs[v.id] = 1;
  }
  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = nodes_[i];
    if (n.op == Op::kLeaf) needs[i] = 1;
    for (auto in : n.inputs) needs[i] = needs[i] || needs[in];
  }

  std::vector<Tensor> grads(count);
  std::vector<char> has(count, 0);
  grads[loss.id] = Tensor(lv.shape(), 1.0);
  has[loss.id] = 1;

  auto contribute = [&](std::uint32_t id, Tensor g) {
    if (!needs[id]) return;
    if (!has[id]) {
      grads[id] = std::move(g);
      has[id] = 1;
    } else {
      accumulate(grads[id], g);
    }
  };
  auto wants = [&](std::uint32_t id) { return needs[id] != 0; };

  for (std::size_t idx = count; idx-- > 0;) {
    if (!has[idx]) continue;
    const Node& n = nodes_[idx];
    const Tensor& g = grads[idx];
    switch (n.op) {
      case Op::kConstant:
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        const Tensor& b = nodes_[n.inputs[1]].val();
        const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
        if (wants(n.inputs[0])) {
          Tensor da(a.shape());
          for (std::size_t i = 0; i < rows; ++i) {
            const double* grow = g.data().data() + i * cols;
            for (std::size_t p = 0; p < inner; ++p) {
              const double* brow = b.data().data() + p * cols;
              double acc = 0.0;
              for (std::size_t j = 0; j < cols; ++j) acc += grow[j] * brow[j];
              da[i * inner + p] = acc;
            }
          }
          contribute(n.inputs[0], std::move(da));
        }
        if (wants(n.inputs[1])) {
          Tensor db(b.shape());
          for (std::size_t i = 0; i < rows; ++i) {
            const double* grow = g.data().data() + i * cols;
            for (std::size_t p = 0; p < inner; ++p) {
              const double av = a[i * inner + p];
              if (av == 0.0) continue;
              double* drow = db.data().data() + p * cols;
              for (std::size_t j = 0; j < cols; ++j) drow[j] += av * grow[j];
            }
          }
          contribute(n.inputs[1], std::move(db));
        }
        break;
      }
      case Op::kTranspose: {
        Tensor da(Shape{g.cols(), g.rows()});
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) da.at(j, i) = g.at(i, j);
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kAdd:
        if (wants(n.inputs[0])) contribute(n.inputs[0], g);
        if (wants(n.inputs[1])) contribute(n.inputs[1], g);
        break;
      case Op::kSub: {
        if (wants(n.inputs[0])) contribute(n.inputs[0], g);
        if (wants(n.inputs[1])) {
          Tensor db(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) db[i] = -g[i];
          contribute(n.inputs[1], std::move(db));
        }
        break;
      }
      case Op::kHadamard: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        const Tensor& b = nodes_[n.inputs[1]].val();
        if (wants(n.inputs[0])) {
          Tensor da(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * b[i];
          contribute(n.inputs[0], std::move(da));
        }
        if (wants(n.inputs[1])) {
          Tensor db(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * a[i];
          contribute(n.inputs[1], std::move(db));
        }
        break;
      }
      case Op::kScale: {
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * n.p0;
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kAddScalar:
        contribute(n.inputs[0], g);
        break;
      case Op::kAddRow: {
        if (wants(n.inputs[0])) contribute(n.inputs[0], g);
        if (wants(n.inputs[1])) {
          const Tensor& rv = nodes_[n.inputs[1]].val();
          Tensor dr(rv.shape());
          const std::size_t c = g.cols();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < c; ++j) dr[j] += g[i * c + j];
          contribute(n.inputs[1], std::move(dr));
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = a[i] > 0.0 ? g[i] : 0.0;
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kSqrtClamped: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = a[i] > 0.0 ? g[i] * 0.5 / n.value[i] : 0.0;
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kSquare: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = 2.0 * a[i] * g[i];
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kClamp: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        Tensor da(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = (a[i] >= n.p0 && a[i] <= n.p1) ? g[i] : 0.0;
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kSum: {
        const Tensor& a = nodes_[n.inputs[0]].val();
        contribute(n.inputs[0], Tensor(a.shape(), g[0]));
        break;
      }
      case Op::kL2NormalizeRows: {
        // d x = (g - y (y . g)) / |x|
        const Tensor& y = n.value;
        const std::size_t r = y.rows(), c = y.cols();
        Tensor da(y.shape());
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
          for (std::size_t j = 0; j < c; ++j) da[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) / n.saved[i];
        }
        contribute(n.inputs[0], std::move(da));
        break;
      }
      case Op::kSoftmaxCrossEntropy: {
        const std::size_t b = n.saved.rows(), s = n.saved.cols();
        const double k = g[0] / static_cast<double>(b);
        Tensor dq(n.saved.shape());
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < s; ++j) dq[i * s + j] = n.saved[i * s + j] * k;
          dq[i * s + static_cast<std::size_t>(n.labels[i])] -= k;
        }
        contribute(n.inputs[0], std::move(dq));
        break;
      }
      case Op::kCustom: {
        std::vector<const Tensor*> ins;
        for (auto in : n.inputs) ins.push_back(&nodes_[in].val());
        std::vector<Tensor> gi = (*n.rule)(g, ins, n.value);
        if (gi.size() != n.inputs.size()) throw DimensionError("custom backward returned wrong gradient count");
        for (std::size_t k = 0; k < gi.size(); ++k) {
          require_same_shape(gi[k], *ins[k], "custom backward");
          contribute(n.inputs[k], std::move(gi[k]));
        }
        break;
      }
    }
  }

  GradientMap out;
  for (Var v : requested) {
    if (v.id < count && has[v.id]) {
      out.insert(v, grads[v.id]);
    } else {
      out.insert(v, Tensor(value(v).shape(), 0.0));
    }
  }
  return out;
}

}  // namespace dpa
