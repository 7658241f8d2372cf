#include "nextscale/autograd.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace nextscale {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "," : "") << shape[i];
  }
  out << ']';
  return out.str();
}

template <class T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

template <class T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  if (!all_finite<T>(value.data)) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& p : parents) {
    any = any || p.requires_grad();
  }
  node->requires_grad = any;
  if (any) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) {
      node->parents.push_back(p.ptr());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

template <class T>
T backward(const Var<T>& loss) {
  require(loss.size() == 1, "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  const T value = loss.value()[0];
  if (!loss.requires_grad()) {
    return value;
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
  // Interior gradients are not needed after the pass.
  for (Node<T>* node : order) {
    if (!node->parents.empty()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
  return value;
}

template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);
template Var<float> make_result(const char*, Tensor<float>, std::vector<Var<float>>,
                                std::function<void(Node<float>&)>);
template Var<double> make_result(const char*, Tensor<double>, std::vector<Var<double>>,
                                 std::function<void(Node<double>&)>);
template float backward(const Var<float>&);
template double backward(const Var<double>&);

}  // namespace nextscale
