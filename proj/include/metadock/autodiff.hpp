#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "metadock/tensor.hpp"

/// Reverse-mode differentiation over a tape of tensor operations.
///
/// A Graph owns every value produced while it is alive. Vars are cheap
/// handles (graph pointer + node index). Nodes are appended in evaluation
/// order, which is already a topological order, so backward() simply walks
/// the tape from the loss down to index 0.
namespace metadock::ad {

enum class OpKind {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kSum,
  kAbsSum,
  kTanh,
  kRelu,
  kMatMul,
  kLinear,
  kConv2d,
  kChannelBias,
  kMaxPool,
  kBatchNorm,
  kGroupNorm,
  kReshape,
  kMaskKernels,
  kBinaryFraction,
  kCrossEntropy,
};

class Graph;

class Var {
 public:
  Var() = default;

  Graph& graph() const;
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Non-differentiable input (data, labels, frozen quantities).
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  /// Accumulated gradient; a zero tensor when backward never reached the node.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  OpKind kind(Var v) const;

  /// Fills gradients of every node reachable from `loss`. Earlier gradients are discarded.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }

  // Used by op implementations.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward);
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad_at(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs_at(std::size_t id) const { return nodes_[id].inputs; }
  /// Gradient buffer for accumulation, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);
  void check_owner(Var v) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::uint64_t id_;
  mutable Tensor zero_grad_;
};

/// Straight-through treatment of mask scores inside the graph.
struct MaskMode {
  enum class Kind { kBinarized, kContinuous };
  Kind kind = Kind::kBinarized;
  double temperature = 1.0;
};

// Elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var tanh(Var a);
Var relu(Var a);
Var reshape(Var a, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

// Reductions
Var sum(Var a);
/// Sum of absolute values; subgradient 0 at 0.
Var abs_sum(Var a);

// Dense
Var matmul(Var a, Var b);
/// x[B,F] * w[N,F]^T + bias[N]
Var linear(Var x, Var w, Var bias);

// Convolutional
/// Cross-correlation of input[B,Cin,H,W] with kernels[Cout,Cin,k,k].
Var conv2d(Var input, Var kernels, int stride, int padding);
Var add_channel_bias(Var x, Var bias);
/// Non-overlapping max pooling, window == stride == `size`, floor semantics.
Var max_pool2d(Var x, int size);
/// Per-channel normalization with statistics of the current batch only.
Var batch_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);

// Masking
/// kernels[Cout,Cin,k,k] scaled per slice by B(mask) (binarized) or by the raw mask (continuous).
/// Binarized mode routes mask gradients through the sigmoid surrogate.
Var mask_kernels(Var kernels, Var masks, MaskMode mode);
/// Fraction of positive mask scores, differentiated through the sigmoid surrogate.
Var binary_fraction(Var masks, double temperature = 1.0);

// Losses
/// Mean negative log-softmax of the labelled class. logits[B,N].
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace metadock::ad
