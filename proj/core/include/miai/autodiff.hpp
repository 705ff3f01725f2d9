#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "miai/tensor.hpp"

namespace miai {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::int32_t id = -1;

  bool valid() const noexcept { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class Op : std::uint8_t {
  kLeaf,
  kDetach,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,
  kSumAll,
  kMeanAll,
  kSumAxis,
  kConcat,
  kSlice,
  kExp,
  kLog,
  kSquare,
  kTanh,
  kSigmoid,
  kElu,
  kLayerNorm,
  kSoftplus,
  kLogSoftmax,
  kClamp,
};

const char* op_name(Op op) noexcept;

/// Layer-norm epsilon, added to the variance inside the square root.
inline constexpr double kLayerNormEps = 1e-5;
/// ELU negative-side scale.
inline constexpr double kEluAlpha = 1.0;

/// Gradients produced by one reverse sweep. Indexed by node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> g) : grads_(std::move(g)) {}

  /// Gradient for v; empty tensor if v received none.
  const Tensor& of(Var v) const;
  bool has(Var v) const;

 private:
  std::vector<Tensor> grads_;
};

/// Define-by-run reverse-mode tape over rank-2 tensors.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. Values are computed eagerly at construction; forward()
/// recomputes every non-leaf node from the current leaf bindings, which lets a
/// finite-difference check perturb a leaf and re-evaluate without rebuilding.
///
/// Binary elementwise ops broadcast any extent equal to 1 against the other
/// operand.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable leaf.
  Var variable(Tensor value, std::string name = {});
  /// Leaf that never receives a gradient.
  Var constant(Tensor value, std::string name = {});
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Copy of x's value that blocks gradient flow.
  Var detach(Var x);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var neg(Var x);
  Var scale(Var x, double c);
  Var sum(Var x);
  Var mean(Var x);
  /// axis 0 -> [1, cols], axis 1 -> [rows, 1].
  Var sum(Var x, int axis);
  /// Column-wise concatenation; all parts share the row count.
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
  }
  /// Columns [begin, begin + count).
  Var slice(Var x, std::size_t begin, std::size_t count);
  std::vector<Var> split(Var x, std::span<const std::size_t> widths);
  Var exp(Var x);
  Var log(Var x);
  Var square(Var x);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var elu(Var x);
  /// Per-row normalization to zero mean / unit variance, no affine part.
  Var layer_norm(Var x);
  /// log(1 + exp(x)), evaluated stably.
  Var softplus(Var x);
  /// Per-row log-softmax.
  Var log_softmax(Var x);
  /// Clamp into [lo, hi]; zero gradient outside the open interval.
  Var clamp(Var x, double lo, double hi);

  const Tensor& value(Var v) const { return nodes_.at(check(v)).value; }
  Op op(Var v) const { return nodes_.at(check(v)).op; }
  bool requires_grad(Var v) const { return nodes_.at(check(v)).requires_grad; }
  bool is_differentiable_leaf(Var v) const;
  const std::string& name(Var v) const { return nodes_.at(check(v)).name; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Rebind a leaf. Call forward() afterwards to refresh dependents.
  void set_leaf(Var leaf, Tensor value);
  /// Re-evaluate every non-leaf node in topological order.
  void forward();

  /// Full reverse sweep from a scalar root. Only nodes that depend on a
  /// differentiable leaf are visited; constants receive no gradient.
  Gradients backward(Var root, double seed = 1.0) const;

  /// Gradient of a scalar root with respect to arbitrary nodes (leaf or not,
  /// differentiable or not). The sweep only covers nodes created at or after
  /// the earliest target, so it is cheap for targets near the root.
  std::vector<Tensor> gradient(Var root, std::span<const Var> wrt, double seed = 1.0) const;

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::int32_t> inputs;
    Tensor value;
    double p0 = 0.0;  // scale factor / clamp lo
    double p1 = 0.0;  // clamp hi
    std::size_t i0 = 0;  // slice begin / reduction axis
    std::size_t i1 = 0;  // slice count
    bool requires_grad = false;
    bool differentiable_leaf = false;
    std::string name;
  };

  std::int32_t check(Var v) const;
  Var push(Node node);
  void evaluate(Node& node) const;
  void accumulate(const Node& node, const Tensor& grad_out, std::vector<Tensor>& grads,
                  std::int32_t floor, bool respect_requires_grad) const;

  std::vector<Node> nodes_;
};

inline Var operator+(Var a, Var b) { return a.graph->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph->mul(a, b); }
inline Var operator-(Var a) { return a.graph->neg(a); }
inline Var operator*(double c, Var a) { return a.graph->scale(a, c); }

/// Result of comparing reverse-mode gradients against central differences.
struct GradientCheckEntry {
  std::string leaf;
  bool has_gradient = false;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  double max_rel_error() const;
};

/// Relative error used throughout the gradient checks:
/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compare backward() against central differences with step h for each of
/// the given leaves. The graph is re-evaluated in place and restored.
GradientCheckReport gradient_check(Graph& graph, Var root, std::span<const Var> leaves,
                                   double h = 1e-5);

}  // namespace miai
