#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "auxnas/params.hpp"
#include "auxnas/tensor.hpp"

namespace auxnas {

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape; }
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Records primitive ops in execution order; backward replays them in reverse.
// A tape belongs to one execution context and is not thread-safe.
template <class T>
class Tape {
 public:
  using Backward = std::function<void()>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, nullptr); }

  // A leaf whose gradient can be read back with grad() after backward.
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, nullptr, nullptr); }

  // Parameters are registered once per tape; their node gradient is added into
  // Param::grad at the end of every backward call.
  Var<T> param(Param<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return {this, it->second};
    Var<T> v = push(p.value, p.trainable, nullptr, &p);
    param_ids_.emplace(&p, v.id);
    return v;
  }

  // Called by ops. inputs_need_grad decides whether the node participates in
  // backward at all.
  Var<T> record(Tensor<T> value, bool needs_grad, Backward bw) {
    return push(std::move(value), needs_grad, needs_grad ? std::move(bw) : nullptr, nullptr);
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Gradient buffer of a node, allocated on first use.
  std::vector<T>& grad(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  std::size_t size() const { return nodes_.size(); }
  // Id the next recorded node will receive; ops capture it in their closures.
  int next_id() const { return static_cast<int>(nodes_.size()); }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("loss belongs to another tape");
    if (value(loss.id).size() != 1) throw ContractError("backward requires a scalar loss, got shape " +
                                                        to_string(value(loss.id).shape));
    for (auto& n : nodes_) n.grad.clear();
    if (!needs_grad(loss.id)) return;
    grad(loss.id)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward();
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      auto& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), T(0));
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Backward backward;
    Param<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool needs_grad, Backward bw, Param<T>* p) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad, std::move(bw), p});
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Param<T>*, int> param_ids_;
};

}  // namespace auxnas
