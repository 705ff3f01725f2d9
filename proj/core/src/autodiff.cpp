#include "miai/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "miai/error.hpp"

namespace miai {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

std::size_t broadcast_extent(std::size_t a, std::size_t b, const char* what) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError(std::string("cannot broadcast extents ") + std::to_string(a) + " and " +
                   std::to_string(b) + " in " + what);
}

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F f, const char* what) {
  const auto r = broadcast_extent(a.rows(), b.rows(), what);
  const auto c = broadcast_extent(a.cols(), b.cols(), what);
  Tensor out({r, c});
  const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = f(a.at(ar ? 0 : i, ac ? 0 : j), b.at(br ? 0 : i, bc ? 0 : j));
    }
  }
  return out;
}

/// Sum a broadcast gradient back down to the operand's shape.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) {
      out.at(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += g.at(i, j);
    }
  }
  return out;
}

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void add_into(std::vector<Tensor>& grads, std::int32_t id, const Tensor& g) {
  auto& slot = grads[static_cast<std::size_t>(id)];
  if (slot.empty()) {
    slot = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

}  // namespace

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kDetach: return "detach";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kSumAll: return "sum";
    case Op::kMeanAll: return "mean";
    case Op::kSumAxis: return "sum_axis";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kElu: return "elu";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kSoftplus: return "softplus";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kClamp: return "clamp";
  }
  return "?";
}

const Tensor& Var::value() const { return graph->value(*this); }

const Tensor& Gradients::of(Var v) const {
  static const Tensor kEmpty;
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= grads_.size()) return kEmpty;
  return grads_[static_cast<std::size_t>(v.id)];
}

bool Gradients::has(Var v) const { return !of(v).empty(); }

std::int32_t Graph::check(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw Error("Var does not belong to this graph");
  }
  return v.id;
}

bool Graph::is_differentiable_leaf(Var v) const {
  return nodes_.at(check(v)).differentiable_leaf;
}

Var Graph::push(Node node) {
  for (auto in : node.inputs) {
    if (nodes_[static_cast<std::size_t>(in)].requires_grad && node.op != Op::kDetach) {
      node.requires_grad = true;
    }
  }
  evaluate(node);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::variable(Tensor value, std::string name) {
  if (value.rank() != 2) throw ShapeError("graph leaves must be rank-2, got " + value.shape_string());
  if (!value.all_finite()) throw NumericError("non-finite value bound to leaf '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = true;
  n.differentiable_leaf = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value, std::string name) {
  if (value.rank() != 2) throw ShapeError("graph leaves must be rank-2, got " + value.shape_string());
  if (!value.all_finite()) throw NumericError("non-finite value bound to leaf '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::detach(Var x) {
  Node n;
  n.op = Op::kDetach;
  n.inputs = {check(x)};
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {check(a), check(b)};
  return push(std::move(n));
}

#define MIAI_BINARY(fn, opcode)         \
  Var Graph::fn(Var a, Var b) {         \
    Node n;                             \
    n.op = opcode;                      \
    n.inputs = {check(a), check(b)};    \
    return push(std::move(n));          \
  }
MIAI_BINARY(add, Op::kAdd)
MIAI_BINARY(sub, Op::kSub)
MIAI_BINARY(mul, Op::kMul)
#undef MIAI_BINARY

#define MIAI_UNARY(fn, opcode)  \
  Var Graph::fn(Var x) {        \
    Node n;                     \
    n.op = opcode;              \
    n.inputs = {check(x)};      \
    return push(std::move(n));  \
  }
MIAI_UNARY(neg, Op::kNeg)
MIAI_UNARY(sum, Op::kSumAll)
MIAI_UNARY(mean, Op::kMeanAll)
MIAI_UNARY(exp, Op::kExp)
MIAI_UNARY(log, Op::kLog)
MIAI_UNARY(square, Op::kSquare)
MIAI_UNARY(tanh, Op::kTanh)
MIAI_UNARY(sigmoid, Op::kSigmoid)
MIAI_UNARY(elu, Op::kElu)
MIAI_UNARY(layer_norm, Op::kLayerNorm)
MIAI_UNARY(softplus, Op::kSoftplus)
MIAI_UNARY(log_softmax, Op::kLogSoftmax)
#undef MIAI_UNARY

Var Graph::scale(Var x, double c) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {check(x)};
  n.p0 = c;
  return push(std::move(n));
}

Var Graph::sum(Var x, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("sum axis must be 0 or 1");
  Node n;
  n.op = Op::kSumAxis;
  n.inputs = {check(x)};
  n.i0 = static_cast<std::size_t>(axis);
  return push(std::move(n));
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero parts");
  Node n;
  n.op = Op::kConcat;
  for (auto p : parts) n.inputs.push_back(check(p));
  return push(std::move(n));
}

Var Graph::slice(Var x, std::size_t begin, std::size_t count) {
  Node n;
  n.op = Op::kSlice;
  n.inputs = {check(x)};
  n.i0 = begin;
  n.i1 = count;
  return push(std::move(n));
}

std::vector<Var> Graph::split(Var x, std::span<const std::size_t> widths) {
  std::vector<Var> out;
  std::size_t begin = 0;
  for (auto w : widths) {
    out.push_back(slice(x, begin, w));
    begin += w;
  }
  if (begin != value(x).cols()) throw ShapeError("split widths do not cover all columns");
  return out;
}

Var Graph::clamp(Var x, double lo, double hi) {
  if (!(lo < hi)) throw Error("clamp requires lo < hi");
  Node n;
  n.op = Op::kClamp;
  n.inputs = {check(x)};
  n.p0 = lo;
  n.p1 = hi;
  return push(std::move(n));
}

void Graph::set_leaf(Var leaf, Tensor value) {
  auto& n = nodes_.at(check(leaf));
  if (n.op != Op::kLeaf) throw Error("set_leaf on a non-leaf node");
  if (!value.same_shape(n.value)) {
    throw ShapeError("set_leaf shape " + value.shape_string() + " != " + n.value.shape_string());
  }
  n.value = std::move(value);
}

void Graph::forward() {
  for (auto& n : nodes_) {
    if (n.op != Op::kLeaf) evaluate(n);
  }
}

void Graph::evaluate(Node& node) const {
  auto in = [&](std::size_t k) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(node.inputs[k])].value;
  };
  Tensor out;
  switch (node.op) {
    case Op::kLeaf:
      return;
    case Op::kDetach:
      out = in(0);
      break;
    case Op::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.cols() != b.rows()) {
        throw ShapeError("matmul " + a.shape_string() + " x " + b.shape_string());
      }
      out = Tensor({a.rows(), b.cols()});
      as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
      break;
    }
    case Op::kAdd:
      out = broadcast_binary(in(0), in(1), [](double x, double y) { return x + y; }, "add");
      break;
    case Op::kSub:
      out = broadcast_binary(in(0), in(1), [](double x, double y) { return x - y; }, "sub");
      break;
    case Op::kMul:
      out = broadcast_binary(in(0), in(1), [](double x, double y) { return x * y; }, "mul");
      break;
    case Op::kNeg:
      out = map_unary(in(0), [](double x) { return -x; });
      break;
    case Op::kScale: {
      const double c = node.p0;
      out = map_unary(in(0), [c](double x) { return c * x; });
      break;
    }
    case Op::kSumAll: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out = Tensor::scalar(s);
      break;
    }
    case Op::kMeanAll: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      out = Tensor::scalar(s / static_cast<double>(in(0).size()));
      break;
    }
    case Op::kSumAxis: {
      const auto& x = in(0);
      if (node.i0 == 0) {
        out = Tensor({1, x.cols()});
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x.at(i, j);
      } else {
        out = Tensor({x.rows(), 1});
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) out[i] += x.at(i, j);
      }
      break;
    }
    case Op::kConcat: {
      const auto r = in(0).rows();
      std::size_t c = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (in(k).rows() != r) throw ShapeError("concat row mismatch");
        c += in(k).cols();
      }
      out = Tensor({r, c});
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const auto& p = in(k);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
      }
      break;
    }
    case Op::kSlice: {
      const auto& x = in(0);
      if (node.i0 + node.i1 > x.cols() || node.i1 == 0) {
        throw ShapeError("slice [" + std::to_string(node.i0) + ", +" + std::to_string(node.i1) +
                         ") of " + x.shape_string());
      }
      out = Tensor({x.rows(), node.i1});
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < node.i1; ++j) out.at(i, j) = x.at(i, node.i0 + j);
      break;
    }
    case Op::kExp:
      out = map_unary(in(0), [](double x) { return std::exp(x); });
      break;
    case Op::kLog:
      out = map_unary(in(0), [](double x) {
        return x > 0 ? std::log(x) : std::numeric_limits<double>::quiet_NaN();
      });
      break;
    case Op::kSquare:
      out = map_unary(in(0), [](double x) { return x * x; });
      break;
    case Op::kTanh:
      out = map_unary(in(0), [](double x) { return std::tanh(x); });
      break;
    case Op::kSigmoid:
      out = map_unary(in(0), stable_sigmoid);
      break;
    case Op::kElu:
      out = map_unary(in(0), [](double x) { return x > 0 ? x : kEluAlpha * std::expm1(x); });
      break;
    case Op::kSoftplus:
      out = map_unary(in(0), stable_softplus);
      break;
    case Op::kClamp: {
      const double lo = node.p0, hi = node.p1;
      out = map_unary(in(0), [lo, hi](double x) { return std::clamp(x, lo, hi); });
      break;
    }
    case Op::kLayerNorm: {
      const auto& x = in(0);
      out = Tensor(x.shape());
      const auto c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += x.at(i, j);
        m /= static_cast<double>(c);
        double v = 0.0;
        for (std::size_t j = 0; j < c; ++j) v += (x.at(i, j) - m) * (x.at(i, j) - m);
        v /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(v + kLayerNormEps);
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = (x.at(i, j) - m) * inv;
      }
      break;
    }
    case Op::kLogSoftmax: {
      const auto& x = in(0);
      out = Tensor(x.shape());
      const auto c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(x.at(i, j) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) - lse;
      }
      break;
    }
  }
  if (!out.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(node.op));
  }
  node.value = std::move(out);
}

void Graph::accumulate(const Node& node, const Tensor& g, std::vector<Tensor>& grads,
                       std::int32_t floor, bool respect_requires_grad) const {
  auto in = [&](std::size_t k) -> const Node& {
    return nodes_[static_cast<std::size_t>(node.inputs[k])];
  };
  auto wants = [&](std::size_t k) {
    const auto id = node.inputs[k];
    if (id < floor) return false;
    return !respect_requires_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
  };
  auto push_grad = [&](std::size_t k, const Tensor& t) { add_into(grads, node.inputs[k], t); };
  const auto& y = node.value;

  switch (node.op) {
    case Op::kLeaf:
    case Op::kDetach:
      return;
    case Op::kMatMul: {
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      if (wants(0)) {
        Tensor ga(a.shape());
        as_matrix(ga).noalias() = as_matrix(g) * as_matrix(b).transpose();
        push_grad(0, ga);
      }
      if (wants(1)) {
        Tensor gb(b.shape());
        as_matrix(gb).noalias() = as_matrix(a).transpose() * as_matrix(g);
        push_grad(1, gb);
      }
      return;
    }
    case Op::kAdd:
    case Op::kSub: {
      const double sign = node.op == Op::kSub ? -1.0 : 1.0;
      if (wants(0)) push_grad(0, reduce_to(g, in(0).value.rows(), in(0).value.cols()));
      if (wants(1)) {
        Tensor gb = reduce_to(g, in(1).value.rows(), in(1).value.cols());
        if (sign < 0) {
          for (auto& v : gb.values()) v = -v;
        }
        push_grad(1, gb);
      }
      return;
    }
    case Op::kMul: {
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      if (wants(0)) {
        Tensor full = broadcast_binary(g, b, [](double x, double z) { return x * z; }, "mul'");
        push_grad(0, reduce_to(full, a.rows(), a.cols()));
      }
      if (wants(1)) {
        Tensor full = broadcast_binary(g, a, [](double x, double z) { return x * z; }, "mul'");
        push_grad(1, reduce_to(full, b.rows(), b.cols()));
      }
      return;
    }
    default:
      break;
  }

  if (!wants(0) && node.op != Op::kConcat) return;
  const auto& x = in(0).value;
  Tensor gx(x.shape());
  switch (node.op) {
    case Op::kNeg:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = -g[i];
      break;
    case Op::kScale:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = node.p0 * g[i];
      break;
    case Op::kSumAll:
      for (auto& v : gx.values()) v = g[0];
      break;
    case Op::kMeanAll: {
      const double s = g[0] / static_cast<double>(x.size());
      for (auto& v : gx.values()) v = s;
      break;
    }
    case Op::kSumAxis:
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) gx.at(i, j) = node.i0 == 0 ? g[j] : g[i];
      break;
    case Op::kConcat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const auto& p = in(k).value;
        if (wants(k)) {
          Tensor gp(p.shape());
          for (std::size_t i = 0; i < p.rows(); ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) gp.at(i, j) = g.at(i, off + j);
          push_grad(k, gp);
        }
        off += p.cols();
      }
      return;
    }
    case Op::kSlice:
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < node.i1; ++j) gx.at(i, node.i0 + j) = g.at(i, j);
      break;
    case Op::kExp:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
      break;
    case Op::kLog:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / x[i];
      break;
    case Op::kSquare:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = 2.0 * x[i] * g[i];
      break;
    case Op::kTanh:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * (1.0 - y[i] * y[i]);
      break;
    case Op::kSigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i] * (1.0 - y[i]);
      break;
    case Op::kElu:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > 0 ? g[i] : g[i] * (y[i] + kEluAlpha);
      break;
    case Op::kSoftplus:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * stable_sigmoid(x[i]);
      break;
    case Op::kClamp:
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] = (x[i] > node.p0 && x[i] < node.p1) ? g[i] : 0.0;
      }
      break;
    case Op::kLayerNorm: {
      const auto c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += x.at(i, j);
        m /= static_cast<double>(c);
        double v = 0.0;
        for (std::size_t j = 0; j < c; ++j) v += (x.at(i, j) - m) * (x.at(i, j) - m);
        v /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(v + kLayerNormEps);
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          mg += g.at(i, j);
          mgy += g.at(i, j) * y.at(i, j);
        }
        mg /= static_cast<double>(c);
        mgy /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          gx.at(i, j) = inv * (g.at(i, j) - mg - y.at(i, j) * mgy);
        }
      }
      break;
    }
    case Op::kLogSoftmax: {
      const auto c = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += g.at(i, j);
        for (std::size_t j = 0; j < c; ++j) gx.at(i, j) = g.at(i, j) - std::exp(y.at(i, j)) * gs;
      }
      break;
    }
    default:
      return;
  }
  push_grad(0, gx);
}

Gradients Graph::backward(Var root, double seed) const {
  const auto r = check(root);
  const auto& rv = nodes_[static_cast<std::size_t>(r)].value;
  if (rv.size() != 1) throw ShapeError("backward root must be scalar, got " + rv.shape_string());
  std::vector<Tensor> grads(static_cast<std::size_t>(r) + 1);
  if (!nodes_[static_cast<std::size_t>(r)].requires_grad) return Gradients(std::move(grads));
  grads[static_cast<std::size_t>(r)] = Tensor(rv.shape(), seed);
  for (std::int32_t i = r; i >= 0; --i) {
    const auto& node = nodes_[static_cast<std::size_t>(i)];
    const auto& g = grads[static_cast<std::size_t>(i)];
    if (g.empty() || !node.requires_grad) continue;
    accumulate(node, g, grads, 0, true);
  }
  // Only differentiable leaves keep their gradient.
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!nodes_[i].differentiable_leaf) grads[i] = Tensor();
  }
  return Gradients(std::move(grads));
}

std::vector<Tensor> Graph::gradient(Var root, std::span<const Var> wrt, double seed) const {
  const auto r = check(root);
  const auto& rv = nodes_[static_cast<std::size_t>(r)].value;
  if (rv.size() != 1) throw ShapeError("gradient root must be scalar, got " + rv.shape_string());
  std::int32_t floor = r;
  for (auto w : wrt) floor = std::min(floor, check(w));
  std::vector<Tensor> grads(static_cast<std::size_t>(r) + 1);
  grads[static_cast<std::size_t>(r)] = Tensor(rv.shape(), seed);
  for (std::int32_t i = r; i > floor; --i) {
    const auto& g = grads[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    accumulate(nodes_[static_cast<std::size_t>(i)], g, grads, floor, false);
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (auto w : wrt) {
    const auto& g = grads[static_cast<std::size_t>(w.id)];
    out.push_back(g.empty() ? Tensor::zeros_like(value(w)) : g);
  }
  return out;
}

double GradientCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradientCheckReport gradient_check(Graph& graph, Var root, std::span<const Var> leaves, double h) {
  GradientCheckReport report;
  const auto grads = graph.backward(root);
  for (auto leaf : leaves) {
    GradientCheckEntry e;
    e.leaf = graph.name(leaf);
    e.has_gradient = grads.has(leaf);
    if (!e.has_gradient) {
      report.entries.push_back(std::move(e));
      continue;
    }
    const Tensor& analytic = grads.of(leaf);
    const Tensor original = graph.value(leaf);
    for (std::size_t i = 0; i < original.size(); ++i) {
      Tensor plus = original, minus = original;
      plus[i] += h;
      minus[i] -= h;
      graph.set_leaf(leaf, plus);
      graph.forward();
      const double fp = graph.value(root)[0];
      graph.set_leaf(leaf, minus);
      graph.forward();
      const double fm = graph.value(root)[0];
      const double numeric = (fp - fm) / (2.0 * h);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[i], numeric));
      e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[i] - numeric));
    }
    graph.set_leaf(leaf, original);
    graph.forward();
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace miai
