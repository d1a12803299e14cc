#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qvit/errors.hpp"

namespace qvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class BackwardContext;
class GradientMap;

// Backward rule of one tape node. Reads the output gradient and accumulates
// into the gradients of whichever inputs require them.
using BackwardFn = std::function<void(BackwardContext&)>;

/// Dense row-major float32 tensor with a handle into the autodiff tape.
///
/// Values are immutable once created, except for leaves (parameters), which
/// the optimizer updates in place through mutable_data(). Copies share the
/// underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::vector<float> to_vector() const;
  float item() const;
  float operator[](std::size_t flat_index) const { return data()[flat_index]; }

  // Leaves only; throws ContractError on a tape node.
  std::span<float> mutable_data();

  bool requires_grad() const;
  bool is_leaf() const;
  // Stable identity of the underlying node; keys GradientMap.
  std::uint64_t id() const;
  const char* op_name() const;
  bool has_custom_grad() const;

  // Same values, cut from the tape.
  Tensor detach() const;
  // Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class BackwardContext;
  friend class GradientMap;
  friend Tensor make_op(const char*, Shape, std::vector<float>, std::vector<Tensor>, BackwardFn, bool);
  friend GradientMap backward(const Tensor& loss);
};

class BackwardContext {
 public:
  std::span<const float> grad_output() const { return grad_out_; }
  // Value computed by the forward pass of this node.
  std::span<const float> output() const { return output_; }
  std::size_t input_count() const { return inputs_.size(); }
  bool needs_grad(std::size_t input) const;
  // Zero-initialized on first access; accumulate with +=.
  std::span<float> grad_input(std::size_t input);

 private:
  BackwardContext(std::span<const float> grad_out, std::span<const float> output,
                  std::span<const std::shared_ptr<detail::Node>> inputs)
      : grad_out_(grad_out), output_(output), inputs_(inputs) {}
  std::span<const float> grad_out_;
  std::span<const float> output_;
  std::span<const std::shared_ptr<detail::Node>> inputs_;
  friend GradientMap backward(const Tensor& loss);
};

/// Records an operation on the tape. When gradient recording is off or no
/// input requires a gradient, the result is a constant and `backward` is
/// dropped. `custom_grad` marks surrogate-gradient nodes (STE).
Tensor make_op(const char* name, Shape shape, std::vector<float> value,
               std::vector<Tensor> inputs, BackwardFn backward, bool custom_grad = false);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// NaN/Inf scan of every forward result. Off by default; tests turn it on.
void set_debug_checks(bool enabled);
bool debug_checks();

/// Gradients of requires_grad leaves, keyed by Tensor::id().
class GradientMap {
 public:
  bool contains(const Tensor& param) const { return grads_.count(param.id()) != 0; }
  // Throws IndexError when the parameter received no gradient.
  const Tensor& at(const Tensor& param) const;
  const Tensor* find(const Tensor& param) const;
  std::size_t size() const { return grads_.size(); }
  void insert(const Tensor& param, Tensor grad);

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
  friend GradientMap backward(const Tensor& loss);
};

/// Reverse-mode sweep from a scalar loss. Every node is visited once in
/// reverse topological order; surrogate rules registered with make_op
/// replace the chain rule at their nodes.
GradientMap backward(const Tensor& loss);

}  // namespace qvit
