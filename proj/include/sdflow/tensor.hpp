#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdflow/common.hpp"

namespace sdflow {

// Surrogate derivative used in place of the Heaviside step during backprop.
struct SurrogateSpec {
  enum class Kind { Atan };
  Kind kind = Kind::Atan;
  float width = 2.0f;  // alpha

  float derivative(float v) const {
    // atan surrogate: g(v) = a / (2 * (1 + (pi*a*v/2)^2)), g(0) = a/2.
    const float a = width;
    const float u = 3.14159265358979323846f * a * v * 0.5f;
    return a / (2.0f * (1.0f + u * u));
  }
};

struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on first use, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

// Value-semantics handle over a shared graph node. Copies alias the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0f, requires_grad);
  }

  static Tensor filled(Shape shape, float v, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(static_cast<size_t>(::sdflow::numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    SDFLOW_CHECK(::sdflow::numel(shape) == static_cast<int64_t>(data.size()),
                 "tensor data length " << data.size() << " does not match shape " << shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<float>& data() { return node_->value; }
  const std::vector<float>& data() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::vector<float>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<float>& grad() const {
    SDFLOW_CHECK(has_grad(), "tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }

  float item() const {
    SDFLOW_CHECK(numel() == 1, "item() on tensor of shape " << shape_str(shape()));
    return node_->value[0];
  }

  // Detached copy of the values: new leaf, no history.
  Tensor detach_copy() const {
    return from_data(shape(), data(), false);
  }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Builds a graph node from an op result. `bw` reads out.grad and accumulates
// into the inputs' grads. Inputs that do not require grad still appear as
// parents so BPTT reaches learnable ancestors through them.
inline Tensor make_node(Shape shape, std::vector<float> value,
                        const std::vector<Tensor>& inputs,
                        std::function<void(TensorNode&)> bw) {
  auto n = std::make_shared<TensorNode>();
  SDFLOW_CHECK(numel(shape) == static_cast<int64_t>(value.size()),
               "op produced " << value.size() << " values for shape " << shape_str(shape));
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(bw);
  }
  return Tensor(n);
}

// Reverse-mode sweep from a scalar root. Non-leaf grads are reset per call;
// leaf grads accumulate across calls.
inline void backward(const Tensor& root) {
  SDFLOW_CHECK(root.numel() == 1,
               "backward() requires a scalar root, got shape " << shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS over parents.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) {
    if (n->backward_fn) {  // non-leaf: fresh gradient each sweep
      n->grad.assign(n->value.size(), 0.0f);
    } else {
      n->ensure_grad();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// Fills with Kaiming-uniform values: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline void kaiming_uniform_(Tensor& t, int64_t fan_in, std::mt19937& rng) {
  SDFLOW_CHECK(fan_in > 0, "kaiming init needs fan_in > 0");
  float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.data()) v = dist(rng);
}

}  // namespace sdflow
