#include "metadock/autodiff.hpp"

#include <atomic>

namespace metadock::ad {

namespace {
std::atomic<std::uint64_t> next_graph_id{1};
}

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("use of an unbound Var");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(*this); }
const Tensor& Var::grad() const { return graph().grad(*this); }
const Shape& Var::shape() const { return value().shape(); }

Graph::Graph() : id_(next_graph_id.fetch_add(1)) {}

void Graph::check_owner(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw std::logic_error("Var does not belong to this graph");
  }
}

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{OpKind::kLeaf, {}, std::move(value), {}, true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::kConstant, {}, std::move(value), {}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
  bool needs = false;
  for (auto in : inputs) needs = needs || nodes_.at(in).requires_grad;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  check_owner(v);
  return nodes_[v.id_].value;
}

const Tensor& Graph::grad(Var v) const {
  check_owner(v);
  const auto& node = nodes_[v.id_];
  if (node.grad.size() == node.value.size() && !node.grad.empty()) return node.grad;
  zero_grad_ = Tensor(node.value.shape());
  return zero_grad_;
}

bool Graph::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id_].requires_grad;
}

OpKind Graph::kind(Var v) const {
  check_owner(v);
  return nodes_[v.id_].kind;
}

Tensor& Graph::grad_buffer(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.size() != node.value.size() || node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Graph::backward(Var loss) {
  check_owner(loss);
  if (nodes_[loss.id_].value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_string(nodes_[loss.id_].value.shape()));
  }
  for (auto& node : nodes_) node.grad = Tensor();
  grad_buffer(loss.id_)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, i);
  }
}

}  // namespace metadock::ad
