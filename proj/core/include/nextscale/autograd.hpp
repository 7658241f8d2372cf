#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nextscale/tensor.hpp"

namespace nextscale {

// Reverse-mode differentiation over a dynamically built graph. Every op result
// holds shared ownership of its inputs; dropping the loss frees the graph and
// leaves only the leaves (parameters) with their accumulated gradients.

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) {
      grad.assign(value.size(), T(0));
    }
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = true) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape; }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }

  // Gradient accumulated by backward(); zeros if nothing reached this node.
  [[nodiscard]] std::vector<T> grad() const {
    if (node_->grad.empty()) {
      return std::vector<T>(node_->value.size(), T(0));
    }
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  [[nodiscard]] Node<T>* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. Checks that every value is finite and throws a
/// NumericError naming `op` otherwise. Parents and the backward closure are
/// only retained when some parent requires a gradient.
template <class T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn);

/// Runs reverse accumulation from a scalar loss and returns its value.
/// Gradients accumulate into leaves; call zero_grad() between steps.
template <class T>
T backward(const Var<T>& loss);

/// A learnable leaf together with its AdamW state.
template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  Tensor<T> m;
  Tensor<T> v;
  long step = 0;
  bool decay = true;  // weight decay applies to matrices, not gains/biases

  Parameter(std::string n, Tensor<T> value, bool apply_decay)
      : name(std::move(n)),
        var(Var<T>::leaf(std::move(value), true)),
        m(var.shape()),
        v(var.shape()),
        decay(apply_decay) {}

  [[nodiscard]] const Tensor<T>& value() const { return var.value(); }
  Tensor<T>& mutable_value() { return var.mutable_value(); }
  [[nodiscard]] const Shape& shape() const { return var.shape(); }
  std::vector<T>& grad_buffer() { return var.node()->grad_buffer(); }
  void zero_grad() { var.zero_grad(); }
};

/// Owns parameters at stable addresses, in registration order.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool decay) {
    for (const auto& p : params_) {
      require(p->name != name, "duplicate parameter name: " + name);
    }
    params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value), decay));
    return *params_.back();
  }

  [[nodiscard]] std::vector<Parameter<T>*> all() const {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
      out.push_back(p.get());
    }
    return out;
  }

  [[nodiscard]] Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p->name == name) {
        return p.get();
      }
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p->zero_grad();
    }
  }

  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      n += p->value().size();
    }
    return n;
  }

  [[nodiscard]] std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

}  // namespace nextscale
