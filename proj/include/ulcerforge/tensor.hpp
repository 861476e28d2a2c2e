#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ulcerforge {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

// Dense row-major float32 tensor with an optional gradient slot.
//
// Tensor is a handle: copies share storage and graph position, as in most
// tensor libraries. Use clone() or detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f);
  static Tensor scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<float> data() { return node_->data; }
  std::span<const float> data() const { return node_->data; }
  // Only valid for single-element tensors.
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return !node_->backward_fn; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<float> grad() { return node_->grad; }
  std::span<const float> grad() const { return node_->grad; }
  void zero_grad();

  // Populates grad on every reachable tensor that requires grad. Gradients
  // accumulate across calls; callers zero them between steps.
  void backward() const;

  // Copy of the values with no graph history and no gradient.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace ulcerforge
