#include "tpm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "tpm/random.hpp"

namespace tpm {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace tpm

namespace tpm::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Multiply: return "multiply";
    case Op::Scale: return "scale";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Gather: return "gather";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Gelu: return "gelu";
    case Op::Relu: return "relu";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::ReduceSum: return "reduce_sum";
    case Op::ReduceMean: return "reduce_mean";
    case Op::ReduceMax: return "reduce_max";
    case Op::Chamfer: return "chamfer";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::WeightedSum: return "weighted_sum";
  }
  return "?";
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

bool is_suffix(const Shape& shorter, const Shape& longer) {
  if (shorter.size() > longer.size()) return false;
  return std::equal(shorter.rbegin(), shorter.rend(), longer.rbegin());
}

[[noreturn]] void shape_fail(const std::string& what, const Shape& a, const Shape& b) {
  throw ShapeError(what + ": " + shape_string(a) + " vs " + shape_string(b));
}

// Copies a [pre, A, mid, B, post] block layout to [pre, B, mid, A, post].
template <typename T>
void swap_axes(const T* in, T* out, std::size_t pre, std::size_t a, std::size_t mid,
               std::size_t b, std::size_t post) {
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t m = 0; m < mid; ++m) {
        for (std::size_t j = 0; j < b; ++j) {
          const T* src = in + ((((p * a + i) * mid + m) * b + j) * post);
          T* dst = out + ((((p * b + j) * mid + m) * a + i) * post);
          std::copy(src, src + post, dst);
        }
      }
    }
  }
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Graph construction

template <typename T>
Var Graph<T>::push(Node n) {
  n.label = (scope_.empty() ? std::string() : scope_ + "/") + op_name(n.op) + "#" +
            std::to_string(nodes_.size());
  for (auto in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  nodes_.push_back(std::move(n));
  forwarded_ = false;
  return Var{nodes_.size() - 1};
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw ParameterError("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw ParameterError("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const Shape& Graph<T>::shape(Var v) const {
  return node(v).shape;
}

template <typename T>
std::string Graph<T>::label(Var v) const {
  return node(v).label;
}

template <typename T>
Var Graph<T>::input(const std::string& name, Shape shape) {
  if (input_ids_.count(name)) throw ParameterError("duplicate graph input '" + name + "'");
  Node n{};
  n.op = Op::Input;
  n.name = name;
  n.shape = std::move(shape);
  Var v = push(std::move(n));
  input_ids_[name] = v.id;
  return v;
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n{};
  n.op = Op::Constant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::param(const std::string& name) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{it->second};
  Node n{};
  n.op = Op::Param;
  n.name = name;
  n.shape = params_->at(name).shape();
  n.needs_grad = true;
  Var v = push(std::move(n));
  param_ids_[name] = v.id;
  return v;
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul needs rank >= 2", sa, sb);
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) shape_fail("matmul inner dimension mismatch", sa, sb);
  Node n{};
  n.op = Op::MatMul;
  n.inputs = {a.id, b.id};
  if (sb.size() == 2) {
    n.shape = sa;
    n.shape.back() = sb[1];
    n.axis0 = 0;  // shared right operand
  } else {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      shape_fail("batched matmul leading dimensions differ", sa, sb);
    }
    n.shape = sa;
    n.shape.back() = sb.back();
    n.axis0 = 1;  // batched
  }
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (!is_suffix(sb, sa) && !is_suffix(sa, sb)) shape_fail("add broadcast mismatch", sa, sb);
  Node n{};
  n.op = Op::Add;
  n.inputs = is_suffix(sb, sa) ? std::vector<std::size_t>{a.id, b.id}
                                : std::vector<std::size_t>{b.id, a.id};
  n.shape = shape(Var{n.inputs[0]});
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::multiply(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (!is_suffix(sb, sa) && !is_suffix(sa, sb)) shape_fail("multiply broadcast mismatch", sa, sb);
  Node n{};
  n.op = Op::Multiply;
  n.inputs = is_suffix(sb, sa) ? std::vector<std::size_t>{a.id, b.id}
                                : std::vector<std::size_t>{b.id, a.id};
  n.shape = shape(Var{n.inputs[0]});
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::scale(Var a, double factor) {
  Node n{};
  n.op = Op::Scale;
  n.inputs = {a.id};
  n.shape = shape(a);
  n.scalar = factor;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::transpose(Var a, std::size_t axis0, std::size_t axis1) {
  const Shape& s = shape(a);
  if (axis0 >= s.size() || axis1 >= s.size()) throw ShapeError("transpose axis out of range");
  if (axis0 > axis1) std::swap(axis0, axis1);
  Node n{};
  n.op = Op::Transpose;
  n.inputs = {a.id};
  n.shape = s;
  std::swap(n.shape[axis0], n.shape[axis1]);
  n.axis0 = axis0;
  n.axis1 = axis1;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::reshape(Var a, Shape s) {
  if (shape_numel(s) != shape_numel(shape(a))) shape_fail("reshape element count", shape(a), s);
  Node n{};
  n.op = Op::Reshape;
  n.inputs = {a.id};
  n.shape = std::move(s);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Shape first = shape(parts[0]);
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  Node n{};
  n.op = Op::Concat;
  n.shape = first;
  n.shape[axis] = 0;
  n.axis0 = axis;
  for (Var p : parts) {
    const Shape& s = shape(p);
    if (s.size() != first.size()) shape_fail("concat rank mismatch", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) shape_fail("concat dimension mismatch", first, s);
    }
    n.shape[axis] += s[axis];
    n.inputs.push_back(p.id);
  }
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::gather(Var a, std::vector<std::size_t> rows) {
  const Shape& s = shape(a);
  if (s.empty()) throw ShapeError("gather on a scalar");
  for (auto r : rows) {
    if (r >= s[0]) throw ShapeError("gather row " + std::to_string(r) + " out of range");
  }
  Node n{};
  n.op = Op::Gather;
  n.inputs = {a.id};
  n.shape = s;
  n.shape[0] = rows.size();
  n.indices = std::move(rows);
  return push(std::move(n));
}

#define TPM_UNARY(method, opcode)                              \
  template <typename T>                                        \
  Var Graph<T>::method(Var a) {                                \
    if (shape(a).empty()) throw ShapeError(#method " needs rank >= 1"); \
    Node n{};                                                  \
    n.op = Op::opcode;                                         \
    n.inputs = {a.id};                                         \
    n.shape = shape(a);                                        \
    return push(std::move(n));                                 \
  }
TPM_UNARY(softmax, Softmax)
TPM_UNARY(gelu, Gelu)
TPM_UNARY(relu, Relu)
#undef TPM_UNARY

template <typename T>
Var Graph<T>::layer_norm(Var a, double eps) {
  if (shape(a).empty()) throw ShapeError("layer_norm needs rank >= 1");
  Node n{};
  n.op = Op::LayerNorm;
  n.inputs = {a.id};
  n.shape = shape(a);
  n.scalar = eps;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum(Var a) {
  Node n{};
  n.op = Op::Sum;
  n.inputs = {a.id};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::mean(Var a) {
  Node n{};
  n.op = Op::Mean;
  n.inputs = {a.id};
  return push(std::move(n));
}

#define TPM_REDUCE(method, opcode)                                      \
  template <typename T>                                                 \
  Var Graph<T>::method(Var a, std::size_t axis) {                       \
    const Shape& s = shape(a);                                          \
    if (axis >= s.size()) throw ShapeError(#method " axis out of range"); \
    if (s[axis] == 0) throw ShapeError(#method " over an empty axis");  \
    Node n{};                                                           \
    n.op = Op::opcode;                                                  \
    n.inputs = {a.id};                                                  \
    n.shape = s;                                                        \
    n.shape.erase(n.shape.begin() + static_cast<std::ptrdiff_t>(axis)); \
    n.axis0 = axis;                                                     \
    return push(std::move(n));                                          \
  }
TPM_REDUCE(reduce_sum, ReduceSum)
TPM_REDUCE(reduce_mean, ReduceMean)
TPM_REDUCE(reduce_max, ReduceMax)
#undef TPM_REDUCE

template <typename T>
Var Graph<T>::chamfer(Var pred, Var truth) {
  const Shape& sp = shape(pred);
  const Shape& st = shape(truth);
  if (sp.size() != 3 || st.size() != 3 || sp[2] != 3 || st[2] != 3 || sp[0] != st[0]) {
    shape_fail("chamfer expects [P, A, 3] and [P, B, 3]", sp, st);
  }
  if (sp[1] == 0 || st[1] == 0) throw ParameterError("chamfer distance of an empty point set");
  Node n{};
  n.op = Op::Chamfer;
  n.inputs = {pred.id, truth.id};
  n.shape = {sp[0]};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::vector<std::size_t> labels) {
  const Shape& s = shape(logits);
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("cross_entropy expects logits [N, K] with N labels, got " + shape_string(s));
  }
  for (auto l : labels) {
    if (l >= s[1]) throw ParameterError("label out of range for cross_entropy");
  }
  Node n{};
  n.op = Op::CrossEntropy;
  n.inputs = {logits.id};
  n.indices = std::move(labels);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) {
    throw ParameterError("weighted_sum needs one weight per term");
  }
  if (terms.empty()) throw ParameterError("weighted_sum of nothing");
  Node n{};
  n.op = Op::WeightedSum;
  n.shape = shape(terms[0]);
  for (Var t : terms) {
    if (shape(t) != n.shape) shape_fail("weighted_sum term shape", n.shape, shape(t));
    n.inputs.push_back(t.id);
  }
  n.weights.assign(weights.begin(), weights.end());
  return push(std::move(n));
}

template <typename T>
void Graph<T>::output(const std::string& name, Var v) {
  node(v);
  outputs_[name] = v.id;
}

// ---------------------------------------------------------------------------------------------
// Forward

template <typename T>
const Tensor<T>& Graph<T>::val(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  if (!forwarded_) throw StateError("graph values requested before forward");
  node(v);
  return val(v.id);
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.numel() == 0 && shape_numel(n.shape) != 0) {
    throw StateError("no gradient recorded for " + n.label);
  }
  return n.grad;
}

template <typename T>
std::map<std::string, Tensor<T>> Graph<T>::forward(const Inputs<T>& inputs) {
  forwarded_ = false;
  for (const auto& [name, id] : input_ids_) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw ShapeError("missing graph input '" + name + "'");
    if (it->second.shape() != nodes_[id].shape) {
      shape_fail("input '" + name + "' shape", nodes_[id].shape, it->second.shape());
    }
  }
  for (const auto& [name, tensor] : inputs) {
    if (!input_ids_.count(name)) throw ShapeError("unexpected graph input '" + name + "'");
  }

  for (auto& n : nodes_) {
    if (n.op == Op::Input) {
      n.value = inputs.at(n.name);
    } else if (n.op == Op::Param) {
      n.external = &params_->at(n.name);
      if (n.external->shape() != n.shape) {
        shape_fail("parameter '" + n.name + "' changed shape", n.shape, n.external->shape());
      }
    } else if (n.op != Op::Constant) {
      eval(n);
    }
    if (!val(static_cast<std::size_t>(&n - nodes_.data())).all_finite()) {
      throw NumericError("non-finite value produced by " + n.label);
    }
  }
  forwarded_ = true;

  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : outputs_) out.emplace(name, val(id));
  return out;
}

template <typename T>
void Graph<T>::eval(Node& n) {
  auto in = [&](std::size_t i) -> const Tensor<T>& { return val(n.inputs[i]); };
  n.value = Tensor<T>(n.shape);
  T* out = n.value.data();

  switch (n.op) {
    case Op::MatMul: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const std::size_t k = a.shape().back();
      const std::size_t cols = b.shape().back();
      if (n.axis0 == 0) {
        const std::size_t rows = a.numel() / k;
        MapM<T>(out, rows, cols).noalias() = CMapM<T>(a.data(), rows, k) * CMapM<T>(b.data(), k, cols);
      } else {
        const std::size_t m = a.shape()[a.rank() - 2];
        const std::size_t batch = a.numel() / (m * k);
        for (std::size_t i = 0; i < batch; ++i) {
          MapM<T>(out + i * m * cols, m, cols).noalias() =
              CMapM<T>(a.data() + i * m * k, m, k) * CMapM<T>(b.data() + i * k * cols, k, cols);
        }
      }
      break;
    }
    case Op::Add:
    case Op::Multiply: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const std::size_t inner = b.numel();
      const std::size_t outer = a.numel() / std::max<std::size_t>(inner, 1);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* pa = a.data() + o * inner;
        T* po = out + o * inner;
        if (n.op == Op::Add) {
          for (std::size_t i = 0; i < inner; ++i) po[i] = pa[i] + b[i];
        } else {
          for (std::size_t i = 0; i < inner; ++i) po[i] = pa[i] * b[i];
        }
      }
      break;
    }
    case Op::Scale: {
      const Tensor<T>& a = in(0);
      const T s = static_cast<T>(n.scalar);
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
      break;
    }
    case Op::Transpose: {
      const Shape& s = in(0).shape();
      swap_axes(in(0).data(), out, prod(s, 0, n.axis0), s[n.axis0], prod(s, n.axis0 + 1, n.axis1),
                s[n.axis1], prod(s, n.axis1 + 1, s.size()));
      break;
    }
    case Op::Reshape:
      std::copy(in(0).data(), in(0).data() + in(0).numel(), out);
      break;
    case Op::Concat: {
      const std::size_t axis = n.axis0;
      const std::size_t outer = prod(n.shape, 0, axis);
      const std::size_t inner = prod(n.shape, axis + 1, n.shape.size());
      const std::size_t total = n.shape[axis] * inner;
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const Tensor<T>& part = in(p);
        const std::size_t width = part.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy(part.data() + o * width, part.data() + (o + 1) * width, out + o * total + offset);
        }
        offset += width;
      }
      break;
    }
    case Op::Gather: {
      const Tensor<T>& a = in(0);
      const std::size_t row = a.numel() / a.shape()[0];
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        std::copy(a.data() + n.indices[r] * row, a.data() + (n.indices[r] + 1) * row, out + r * row);
      }
      break;
    }
    case Op::Softmax: {
      const Tensor<T>& a = in(0);
      const std::size_t width = n.shape.back();
      const std::size_t rows = a.numel() / width;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.data() + r * width;
        T* y = out + r * width;
        const T mx = *std::max_element(x, x + width);
        T total = 0;
        for (std::size_t i = 0; i < width; ++i) {
          y[i] = std::exp(x[i] - mx);
          total += y[i];
        }
        for (std::size_t i = 0; i < width; ++i) y[i] /= total;
      }
      break;
    }
    case Op::LayerNorm: {
      const Tensor<T>& a = in(0);
      const std::size_t width = n.shape.back();
      const std::size_t rows = a.numel() / width;
      n.aux.assign(rows, T(0));  // reciprocal standard deviation per row
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.data() + r * width;
        T* y = out + r * width;
        T mu = 0;
        for (std::size_t i = 0; i < width; ++i) mu += x[i];
        mu /= static_cast<T>(width);
        T var = 0;
        for (std::size_t i = 0; i < width; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= static_cast<T>(width);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(n.scalar));
        n.aux[r] = rstd;
        for (std::size_t i = 0; i < width; ++i) y[i] = (x[i] - mu) * rstd;
      }
      break;
    }
    case Op::Gelu: {
      const Tensor<T>& a = in(0);
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = gelu_value(a[i]);
      break;
    }
    case Op::Relu: {
      const Tensor<T>& a = in(0);
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const Tensor<T>& a = in(0);
      T total = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) total += a[i];
      out[0] = n.op == Op::Sum ? total : total / static_cast<T>(a.numel());
      break;
    }
    case Op::ReduceSum:
    case Op::ReduceMean:
    case Op::ReduceMax: {
      const Tensor<T>& a = in(0);
      const Shape& s = a.shape();
      const std::size_t outer = prod(s, 0, n.axis0);
      const std::size_t len = s[n.axis0];
      const std::size_t inner = prod(s, n.axis0 + 1, s.size());
      if (n.op == Op::ReduceMax) n.argidx.assign(outer * inner, 0);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* base = a.data() + o * len * inner;
        T* dst = out + o * inner;
        if (n.op == Op::ReduceMax) {
          std::size_t* arg = n.argidx.data() + o * inner;
          std::copy(base, base + inner, dst);
          for (std::size_t l = 1; l < len; ++l) {
            const T* row = base + l * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              if (row[i] > dst[i]) {
                dst[i] = row[i];
                arg[i] = l;
              }
            }
          }
        } else {
          for (std::size_t l = 0; l < len; ++l) {
            const T* row = base + l * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
          }
          if (n.op == Op::ReduceMean) {
            for (std::size_t i = 0; i < inner; ++i) dst[i] /= static_cast<T>(len);
          }
        }
      }
      break;
    }
    case Op::Chamfer: {
      const Tensor<T>& p = in(0);
      const Tensor<T>& q = in(1);
      const std::size_t sets = n.shape[0];
      const std::size_t na = p.shape()[1];
      const std::size_t nb = q.shape()[1];
      // argidx holds, per set, the nearest truth index of each pred point followed by the
      // nearest pred index of each truth point.
      n.argidx.assign(sets * (na + nb), 0);
      for (std::size_t s = 0; s < sets; ++s) {
        const T* a = p.data() + s * na * 3;
        const T* b = q.data() + s * nb * 3;
        std::size_t* nn_ab = n.argidx.data() + s * (na + nb);
        std::size_t* nn_ba = nn_ab + na;
        std::vector<T> best_b(nb, std::numeric_limits<T>::infinity());
        T sum_a = 0;
        for (std::size_t i = 0; i < na; ++i) {
          T best = std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < nb; ++j) {
            const T dx = a[3 * i] - b[3 * j];
            const T dy = a[3 * i + 1] - b[3 * j + 1];
            const T dz = a[3 * i + 2] - b[3 * j + 2];
            const T d = dx * dx + dy * dy + dz * dz;
            if (d < best) {
              best = d;
              nn_ab[i] = j;
            }
            if (d < best_b[j]) {
              best_b[j] = d;
              nn_ba[j] = i;
            }
          }
          sum_a += best;
        }
        T sum_b = 0;
        for (std::size_t j = 0; j < nb; ++j) sum_b += best_b[j];
        out[s] = sum_a / static_cast<T>(na) + sum_b / static_cast<T>(nb);
      }
      break;
    }
    case Op::CrossEntropy: {
      const Tensor<T>& z = in(0);
      const std::size_t rows = z.shape()[0];
      const std::size_t k = z.shape()[1];
      n.aux.assign(rows * k, T(0));  // softmax probabilities
      T total = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = z.data() + r * k;
        T* p = n.aux.data() + r * k;
        const T mx = *std::max_element(x, x + k);
        T denom = 0;
        for (std::size_t i = 0; i < k; ++i) {
          p[i] = std::exp(x[i] - mx);
          denom += p[i];
        }
        for (std::size_t i = 0; i < k; ++i) p[i] /= denom;
        total += -(x[n.indices[r]] - mx - std::log(denom));
      }
      out[0] = total / static_cast<T>(rows);
      break;
    }
    case Op::WeightedSum: {
      for (std::size_t t = 0; t < n.inputs.size(); ++t) {
        const Tensor<T>& a = in(t);
        const T w = static_cast<T>(n.weights[t]);
        for (std::size_t i = 0; i < a.numel(); ++i) out[i] += w * a[i];
      }
      break;
    }
    case Op::Input:
    case Op::Constant:
    case Op::Param:
      break;
  }
}

// ---------------------------------------------------------------------------------------------
// Backward

template <typename T>
NamedTensors<T> Graph<T>::backward(Var loss) {
  if (!forwarded_) throw StateError("backward called before forward");
  Node& root = node(loss);
  if (shape_numel(root.shape) != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(root.shape));
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
  for (std::size_t i = 0; i <= loss.id; ++i) {
    if (nodes_[i].needs_grad) nodes_[i].grad = Tensor<T>(nodes_[i].shape);
  }
  if (root.needs_grad) {
    root.grad[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.op != Op::Param) propagate(n);
    }
  }

  NamedTensors<T> grads;
  for (const auto& e : params_->entries()) {
    auto it = param_ids_.find(e.name);
    if (it != param_ids_.end() && it->second <= loss.id && nodes_[it->second].grad.numel() != 0) {
      grads.add(e.name, nodes_[it->second].grad);
    } else {
      grads.add(e.name, Tensor<T>(e.value.shape()));
    }
  }
  return grads;
}

template <typename T>
void Graph<T>::propagate(Node& n) {
  const T* g = n.grad.data();
  auto in = [&](std::size_t i) -> const Tensor<T>& { return val(n.inputs[i]); };
  auto target = [&](std::size_t i) -> Node* {
    Node& t = nodes_[n.inputs[i]];
    return t.needs_grad ? &t : nullptr;
  };

  switch (n.op) {
    case Op::MatMul: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const std::size_t k = a.shape().back();
      const std::size_t cols = b.shape().back();
      Node* ga = target(0);
      Node* gb = target(1);
      if (n.axis0 == 0) {
        const std::size_t rows = a.numel() / k;
        CMapM<T> G(g, rows, cols);
        if (ga) MapM<T>(ga->grad.data(), rows, k).noalias() += G * CMapM<T>(b.data(), k, cols).transpose();
        if (gb) MapM<T>(gb->grad.data(), k, cols).noalias() += CMapM<T>(a.data(), rows, k).transpose() * G;
      } else {
        const std::size_t m = a.shape()[a.rank() - 2];
        const std::size_t batch = a.numel() / (m * k);
        for (std::size_t i = 0; i < batch; ++i) {
          CMapM<T> G(g + i * m * cols, m, cols);
          if (ga) {
            MapM<T>(ga->grad.data() + i * m * k, m, k).noalias() +=
                G * CMapM<T>(b.data() + i * k * cols, k, cols).transpose();
          }
          if (gb) {
            MapM<T>(gb->grad.data() + i * k * cols, k, cols).noalias() +=
                CMapM<T>(a.data() + i * m * k, m, k).transpose() * G;
          }
        }
      }
      break;
    }
    case Op::Add:
    case Op::Multiply: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const std::size_t inner = b.numel();
      const std::size_t outer = a.numel() / std::max<std::size_t>(inner, 1);
      Node* ga = target(0);
      Node* gb = target(1);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* go = g + o * inner;
        const T* pa = a.data() + o * inner;
        if (n.op == Op::Add) {
          if (ga) {
            T* d = ga->grad.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] += go[i];
          }
          if (gb) {
            T* d = gb->grad.data();
            for (std::size_t i = 0; i < inner; ++i) d[i] += go[i];
          }
        } else {
          if (ga) {
            T* d = ga->grad.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] += go[i] * b[i];
          }
          if (gb) {
            T* d = gb->grad.data();
            for (std::size_t i = 0; i < inner; ++i) d[i] += go[i] * pa[i];
          }
        }
      }
      break;
    }
    case Op::Scale: {
      if (Node* t = target(0)) {
        const T s = static_cast<T>(n.scalar);
        for (std::size_t i = 0; i < n.grad.numel(); ++i) t->grad[i] += g[i] * s;
      }
      break;
    }
    case Op::Transpose: {
      if (Node* t = target(0)) {
        // The output layout is [pre, B, mid, A, post]; swapping back restores the input layout.
        const Shape& s = n.shape;
        std::vector<T> tmp(n.grad.numel());
        swap_axes(g, tmp.data(), prod(s, 0, n.axis0), s[n.axis0], prod(s, n.axis0 + 1, n.axis1),
                  s[n.axis1], prod(s, n.axis1 + 1, s.size()));
        for (std::size_t i = 0; i < tmp.size(); ++i) t->grad[i] += tmp[i];
      }
      break;
    }
    case Op::Reshape: {
      if (Node* t = target(0)) {
        for (std::size_t i = 0; i < n.grad.numel(); ++i) t->grad[i] += g[i];
      }
      break;
    }
    case Op::Concat: {
      const std::size_t axis = n.axis0;
      const std::size_t outer = prod(n.shape, 0, axis);
      const std::size_t inner = prod(n.shape, axis + 1, n.shape.size());
      const std::size_t total = n.shape[axis] * inner;
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const std::size_t width = nodes_[n.inputs[p]].shape[axis] * inner;
        if (Node* t = target(p)) {
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g + o * total + offset;
            T* dst = t->grad.data() + o * width;
            for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
          }
        }
        offset += width;
      }
      break;
    }
    case Op::Gather: {
      if (Node* t = target(0)) {
        const std::size_t row = t->grad.numel() / t->shape[0];
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          T* dst = t->grad.data() + n.indices[r] * row;
          const T* src = g + r * row;
          for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
        }
      }
      break;
    }
    case Op::Softmax: {
      if (Node* t = target(0)) {
        const std::size_t width = n.shape.back();
        const std::size_t rows = n.value.numel() / width;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = n.value.data() + r * width;
          const T* gy = g + r * width;
          T dotp = 0;
          for (std::size_t i = 0; i < width; ++i) dotp += gy[i] * y[i];
          T* dx = t->grad.data() + r * width;
          for (std::size_t i = 0; i < width; ++i) dx[i] += y[i] * (gy[i] - dotp);
        }
      }
      break;
    }
    case Op::LayerNorm: {
      if (Node* t = target(0)) {
        const std::size_t width = n.shape.back();
        const std::size_t rows = n.value.numel() / width;
        const T inv_w = T(1) / static_cast<T>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xhat = n.value.data() + r * width;
          const T* gy = g + r * width;
          T mean_g = 0;
          T mean_gx = 0;
          for (std::size_t i = 0; i < width; ++i) {
            mean_g += gy[i];
            mean_gx += gy[i] * xhat[i];
          }
          mean_g *= inv_w;
          mean_gx *= inv_w;
          T* dx = t->grad.data() + r * width;
          for (std::size_t i = 0; i < width; ++i) {
            dx[i] += n.aux[r] * (gy[i] - mean_g - xhat[i] * mean_gx);
          }
        }
      }
      break;
    }
    case Op::Gelu: {
      if (Node* t = target(0)) {
        const Tensor<T>& a = in(0);
        for (std::size_t i = 0; i < a.numel(); ++i) t->grad[i] += g[i] * gelu_derivative(a[i]);
      }
      break;
    }
    case Op::Relu: {
      if (Node* t = target(0)) {
        const Tensor<T>& a = in(0);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          if (a[i] > T(0)) t->grad[i] += g[i];
        }
      }
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      if (Node* t = target(0)) {
        const T d = n.op == Op::Sum ? g[0] : g[0] / static_cast<T>(t->grad.numel());
        for (std::size_t i = 0; i < t->grad.numel(); ++i) t->grad[i] += d;
      }
      break;
    }
    case Op::ReduceSum:
    case Op::ReduceMean:
    case Op::ReduceMax: {
      if (Node* t = target(0)) {
        const Shape& s = t->shape;
        const std::size_t outer = prod(s, 0, n.axis0);
        const std::size_t len = s[n.axis0];
        const std::size_t inner = prod(s, n.axis0 + 1, s.size());
        const T factor = n.op == Op::ReduceMean ? T(1) / static_cast<T>(len) : T(1);
        for (std::size_t o = 0; o < outer; ++o) {
          const T* go = g + o * inner;
          T* base = t->grad.data() + o * len * inner;
          if (n.op == Op::ReduceMax) {
            const std::size_t* arg = n.argidx.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) base[arg[i] * inner + i] += go[i];
          } else {
            for (std::size_t l = 0; l < len; ++l) {
              T* row = base + l * inner;
              for (std::size_t i = 0; i < inner; ++i) row[i] += go[i] * factor;
            }
          }
        }
      }
      break;
    }
    case Op::Chamfer: {
      const Tensor<T>& p = in(0);
      const Tensor<T>& q = in(1);
      Node* gp = target(0);
      Node* gq = target(1);
      const std::size_t sets = n.shape[0];
      const std::size_t na = p.shape()[1];
      const std::size_t nb = q.shape()[1];
      for (std::size_t s = 0; s < sets; ++s) {
        const T* a = p.data() + s * na * 3;
        const T* b = q.data() + s * nb * 3;
        const std::size_t* nn_ab = n.argidx.data() + s * (na + nb);
        const std::size_t* nn_ba = nn_ab + na;
        T* da = gp ? gp->grad.data() + s * na * 3 : nullptr;
        T* db = gq ? gq->grad.data() + s * nb * 3 : nullptr;
        const T fa = T(2) * g[s] / static_cast<T>(na);
        const T fb = T(2) * g[s] / static_cast<T>(nb);
        for (std::size_t i = 0; i < na; ++i) {
          const std::size_t j = nn_ab[i];
          for (std::size_t c = 0; c < 3; ++c) {
            const T diff = a[3 * i + c] - b[3 * j + c];
            if (da) da[3 * i + c] += fa * diff;
            if (db) db[3 * j + c] -= fa * diff;
          }
        }
        for (std::size_t j = 0; j < nb; ++j) {
          const std::size_t i = nn_ba[j];
          for (std::size_t c = 0; c < 3; ++c) {
            const T diff = b[3 * j + c] - a[3 * i + c];
            if (db) db[3 * j + c] += fb * diff;
            if (da) da[3 * i + c] -= fb * diff;
          }
        }
      }
      break;
    }
    case Op::CrossEntropy: {
      if (Node* t = target(0)) {
        const std::size_t rows = t->shape[0];
        const std::size_t k = t->shape[1];
        const T f = g[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* p = n.aux.data() + r * k;
          T* dz = t->grad.data() + r * k;
          for (std::size_t i = 0; i < k; ++i) dz[i] += f * (p[i] - (i == n.indices[r] ? T(1) : T(0)));
        }
      }
      break;
    }
    case Op::WeightedSum: {
      for (std::size_t term = 0; term < n.inputs.size(); ++term) {
        if (Node* t = target(term)) {
          const T w = static_cast<T>(n.weights[term]);
          for (std::size_t i = 0; i < n.grad.numel(); ++i) t->grad[i] += w * g[i];
        }
      }
      break;
    }
    case Op::Input:
    case Op::Constant:
    case Op::Param:
      break;
  }
}

// ---------------------------------------------------------------------------------------------

template <typename T>
Var scaled_dot_product_attention(Graph<T>& g, Var q, Var k, Var v, std::size_t heads) {
  const Shape s = g.shape(q);
  if (s.size() != 3 || g.shape(k) != s || g.shape(v) != s) {
    throw ShapeError("attention expects q, k, v of equal shape [B, T, C], got " + shape_string(s));
  }
  const std::size_t batch = s[0];
  const std::size_t tokens = s[1];
  const std::size_t width = s[2];
  if (heads == 0 || width % heads != 0) throw ParameterError("head count must divide the width");
  const std::size_t head_dim = width / heads;
  typename Graph<T>::Scope scope(g, "attention");

  auto split = [&](Var x) {
    return g.transpose(g.reshape(x, {batch, tokens, heads, head_dim}), 1, 2);  // [B, H, T, d]
  };
  const Var qh = split(q);
  const Var kt = g.transpose(split(k), 2, 3);  // [B, H, d, T]
  const Var vh = split(v);
  const Var scores = g.scale(g.matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Var weights = g.softmax(scores);
  const Var mixed = g.matmul(weights, vh);  // [B, H, T, d]
  return g.reshape(g.transpose(mixed, 1, 2), {batch, tokens, width});
}

GradCheckReport grad_check(Graph<double>& graph, NamedTensors<double>& params, Var loss,
                           const Inputs<double>& inputs, double eps, double tol,
                           std::size_t samples_per_param, std::uint64_t seed) {
  if (!(eps > 0.0)) throw ParameterError("finite-difference step must be positive");
  if (&graph.params() != &params) {
    throw ParameterError("grad_check must perturb the store the graph reads from");
  }
  graph.forward(inputs);
  const NamedTensors<double> analytic = graph.backward(loss);
  Rng rng(derive_seed(seed, {0x9c4eULL}));

  auto eval_loss = [&]() { return graph.forward(inputs), graph.value(loss)[0]; };

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& value = params[p].value;
    GradCheckEntry entry;
    entry.name = params[p].name;
    std::vector<std::size_t> coords(value.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > samples_per_param) {
      rng.shuffle(coords);
      coords.resize(samples_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double saved = value[c];
      value[c] = saved + eps;
      const double up = eval_loss();
      value[c] = saved - eps;
      const double down = eval_loss();
      value[c] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = analytic[p].value[c];
      const double abs_err = std::abs(exact - numeric);
      const double rel = abs_err / std::max({std::abs(exact), std::abs(numeric), 1e-12});
      entry.max_relative_error = std::max(entry.max_relative_error, rel);
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      ++entry.coordinates_checked;
    }
    report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
    report.entries.push_back(std::move(entry));
  }
  graph.forward(inputs);
  report.passed = report.max_relative_error < tol;
  return report;
}

template class Graph<float>;
template class Graph<double>;
template Var scaled_dot_product_attention(Graph<float>&, Var, Var, Var, std::size_t);
template Var scaled_dot_product_attention(Graph<double>&, Var, Var, Var, std::size_t);

}  // namespace tpm::ad
