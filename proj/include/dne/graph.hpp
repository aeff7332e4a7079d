// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over rank-2 tensors. A Graph
// records every operation in execution order, so the node list is already
// topologically sorted and backward() is a single reverse sweep.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dne/tensor.hpp"

namespace dne {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push("constant", std::move(value), {}, false, nullptr); }

  /// Leaf whose gradient is kept on the graph (used by gradient checks).
  Var input(Tensor value, bool requires_grad = true) {
    return push("input", std::move(value), {}, requires_grad, nullptr);
  }

  /// Leaf bound to a model parameter. Frozen parameters behave as constants;
  /// trainable ones receive their gradient in Tensor::grad after backward().
  Var parameter(const Tensor& param) {
    const bool trainable = !param.frozen;
    auto v = push("parameter", param, {}, trainable, trainable ? &param : nullptr);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated at a node by the last backward(); zeros if none.
  std::vector<double> grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<double>(n.value.numel(), 0.0);
    return n.grad;
  }

  void backward(Var root) {
    const auto& r = nodes_.at(root.id);
    if (r.value.numel() != 1)
      throw ContractError("backward() requires a scalar root, got " +
                          shape_string(r.value.shape));
    for (auto& n : nodes_) n.grad.clear();
    if (!r.requires_grad) return;
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto* p = const_cast<Tensor*>(n.param);
        p->ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) p->grad[k] += n.grad[k];
      }
    }
  }

  /// Multiply-accumulate counter for matrix products and attention contractions.
  std::uint64_t macs() const { return macs_; }
  void add_macs(std::uint64_t n) { macs_ += n; }

  // -- op-author interface ---------------------------------------------------

  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs,
             BackwardFn backward) {
    bool rg = false;
    for (auto id : inputs) rg = rg || nodes_.at(id).requires_grad;
    auto v = push(std::move(op), std::move(value), std::move(inputs), rg, nullptr);
    if (rg) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  const std::vector<double>& out_grad(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of an input node, allocated on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    const Tensor* param = nullptr;
    BackwardFn backward;
    std::vector<double> grad;
  };

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, bool rg,
           const Tensor* param) {
    value.grad.clear();
    value.frozen = false;
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs), rg, param,
                          nullptr, {}});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

inline const Tensor& Var::value() const { return graph->value(*this); }
inline bool Var::requires_grad() const { return graph->requires_grad(*this); }

}  // namespace dne
