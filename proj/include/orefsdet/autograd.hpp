#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "orefsdet/tensor.hpp"

namespace orefsdet {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Tensor<T>&)> backward_fn;

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty())
      grad = g;
    else
      grad += g;
  }
};

/// Handle to a value in the autograd graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  /// In-place access for optimizer updates and checkpoint loads only.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  void accumulate_grad(const Tensor<T>& g) const { node_->accumulate(g); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Reverse-mode sweep from this scalar. Gradients add into leaves; the
  /// interior graph is released afterwards.
  void backward() {
    if (numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(shape()));
    if (!requires_grad()) return;
    std::vector<std::shared_ptr<Node<T>>> order;  // owning: releasing closures must not free pending nodes
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->inputs.size()) {
        const std::shared_ptr<Node<T>>& child = n->inputs[idx++];
        if (child->requires_grad && !seen.count(child.get())) {
          seen.insert(child.get());
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(Tensor<T>(shape(), T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = it->get();
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
      if (n->backward_fn) {
        n->backward_fn = nullptr;
        n->inputs.clear();
        if (n != node_.get()) n->grad = Tensor<T>();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps a forward result into the graph. `backward` receives the output
/// gradient and must push contributions into the captured inputs.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& v : inputs)
    if (v.requires_grad()) n.inputs.push_back(v.node());
  n.backward_fn = std::forward<Backward>(backward);
  return out;
}

template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward&& backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& v : inputs)
    if (v.requires_grad()) n.inputs.push_back(v.node());
  n.backward_fn = std::forward<Backward>(backward);
  return out;
}

/// A trainable tensor with its dotted checkpoint name.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
};

/// Ordered collection of named parameters; order defines checkpoint layout.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, Var<T> v) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.push_back({std::move(name), std::move(v)});
  }
  void append(const ParameterList& other) {
    for (const auto& p : other.items_) add(p.name, p.var);
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second];
  }

  void zero_grad() {
    for (auto& p : items_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Exact element count over all named parameters.
template <typename T>
std::size_t count_parameters(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.numel();
  return n;
}

}  // namespace orefsdet
