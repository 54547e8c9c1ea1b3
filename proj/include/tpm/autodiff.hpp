#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tpm/tensor.hpp"

namespace tpm::ad {

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
  bool valid() const { return id != kInvalid; }
};

template <typename T>
using Inputs = std::map<std::string, Tensor<T>>;

enum class Op : std::uint8_t {
  Input,
  Constant,
  Param,
  MatMul,
  Add,
  Multiply,
  Scale,
  Transpose,
  Reshape,
  Concat,
  Gather,
  Softmax,
  LayerNorm,
  Gelu,
  Relu,
  Sum,
  Mean,
  ReduceSum,
  ReduceMean,
  ReduceMax,
  Chamfer,
  CrossEntropy,
  WeightedSum,
};

const char* op_name(Op op);

/// Define-then-run reverse-mode graph.
///
/// Builder calls append nodes in topological order and infer static shapes (ShapeError on
/// mismatch). forward() evaluates every node against named inputs and caches the values;
/// backward() walks the nodes in reverse with a fixed accumulation order, so repeated runs are
/// bitwise reproducible. Parameters are referenced by name from an external NamedTensors store,
/// which lets the same graph be re-run after the store is perturbed (finite differences) or
/// updated (optimizer).
template <typename T>
class Graph {
 public:
  explicit Graph(const NamedTensors<T>& params) : params_(&params) {}

  Var input(const std::string& name, Shape shape);
  Var constant(Tensor<T> value);
  /// One node per parameter name; repeated calls return the same node.
  Var param(const std::string& name);

  /// a: [..., m, k]. b: [k, n] (shared across leading dims) or [..., k, n] with the same
  /// leading dims as a (batched).
  Var matmul(Var a, Var b);
  /// Elementwise; the shorter operand's shape must be a suffix of the longer one's and is
  /// broadcast over the leading dims.
  Var add(Var a, Var b);
  Var multiply(Var a, Var b);
  Var scale(Var a, double factor);
  Var transpose(Var a, std::size_t axis0, std::size_t axis1);
  Var reshape(Var a, Shape shape);
  Var concat(std::span<const Var> parts, std::size_t axis);
  /// Selects rows along axis 0.
  Var gather(Var a, std::vector<std::size_t> rows);
  /// Along the last axis, with the row max subtracted first.
  Var softmax(Var a);
  /// Normalizes the last axis to zero mean and unit variance (no affine terms).
  Var layer_norm(Var a, double eps = 1e-5);
  Var gelu(Var a);
  Var relu(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var reduce_sum(Var a, std::size_t axis);
  Var reduce_mean(Var a, std::size_t axis);
  /// Ties resolve to the lowest index along the axis.
  Var reduce_max(Var a, std::size_t axis);
  /// pred [P, A, 3], truth [P, B, 3] -> [P] squared-distance Chamfer per pair of sets.
  Var chamfer(Var pred, Var truth);
  /// logits [N, K] -> scalar mean negative log-likelihood of `labels`.
  Var cross_entropy(Var logits, std::vector<std::size_t> labels);
  /// sum_i weights[i] * terms[i]; all terms share one shape.
  Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

  /// Names a node so forward() returns its value.
  void output(const std::string& name, Var v);

  /// Label prefix applied to nodes created while the scope is alive (used in error messages).
  class Scope {
   public:
    Scope(Graph& g, const std::string& name) : g_(g), saved_(g.scope_) {
      g_.scope_ = saved_.empty() ? name : saved_ + "/" + name;
    }
    ~Scope() { g_.scope_ = saved_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph& g_;
    std::string saved_;
  };

  std::map<std::string, Tensor<T>> forward(const Inputs<T>& inputs);
  /// Gradient of a scalar node with respect to every tensor in the parameter store (zeros for
  /// parameters the loss does not reach), in store order.
  NamedTensors<T> backward(Var loss);

  const Shape& shape(Var v) const;
  const Tensor<T>& value(Var v) const;
  /// Available after backward() for nodes that depend on a parameter.
  const Tensor<T>& grad(Var v) const;
  std::string label(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }
  const NamedTensors<T>& params() const { return *params_; }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::string label;
    bool needs_grad = false;
    // Op attributes.
    std::string name;
    double scalar = 0.0;
    std::size_t axis0 = 0;
    std::size_t axis1 = 0;
    std::vector<std::size_t> indices;
    std::vector<double> weights;
    // Forward cache.
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    std::vector<T> aux;
    std::vector<std::size_t> argidx;
    // Backward buffer.
    Tensor<T> grad;
  };

  Var push(Node node);
  Node& node(Var v);
  const Node& node(Var v) const;
  const Tensor<T>& val(std::size_t id) const;
  void eval(Node& n);
  void propagate(Node& n);

  const NamedTensors<T>* params_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> input_ids_;
  std::map<std::string, std::size_t> param_ids_;
  std::map<std::string, std::size_t> outputs_;
  std::string scope_;
  bool forwarded_ = false;
};

/// Multi-head scaled dot-product attention composed from graph primitives.
/// q, k, v: [B, T, H * d] -> [B, T, H * d].
template <typename T>
Var scaled_dot_product_attention(Graph<T>& g, Var q, Var k, Var v, std::size_t heads);

struct GradCheckEntry {
  std::string name;
  std::size_t coordinates_checked = 0;
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Compares backward() against central differences for up to `samples_per_param` coordinates
/// of every parameter (all of them when the tensor is smaller). Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12). Perturbs `params` in place and
/// restores each coordinate. Throws ParameterError if eps <= 0.
GradCheckReport grad_check(Graph<double>& graph, NamedTensors<double>& params, Var loss,
                           const Inputs<double>& inputs, double eps = 1e-5, double tol = 1e-3,
                           std::size_t samples_per_param = 32, std::uint64_t seed = 0);

}  // namespace tpm::ad
