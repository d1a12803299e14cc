#include "qvit/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace qvit {

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool custom_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

namespace {

std::atomic<std::uint64_t> next_id{1};
std::atomic<bool> debug_scan{false};
thread_local bool grad_mode = true;

std::shared_ptr<Node> new_node(Shape shape, std::vector<float> value) {
  if (shape_numel(shape) != value.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                         std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void scan_finite(const char* op, std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace
}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::vector<float> v(shape_numel(shape), value);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  auto node = detail::new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const float> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->leaf) {
    throw ContractError(std::string("in-place write to non-leaf tensor produced by ") + node_->op);
  }
  return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }
std::uint64_t Tensor::id() const { return node_ ? node_->id : 0; }
const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }
bool Tensor::has_custom_grad() const { return node_ && node_->custom_grad; }

Tensor Tensor::detach() const {
  if (!node_) return {};
  if (!node_->requires_grad) return *this;
  return from(node_->shape, node_->value, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), to_vector(), requires_grad);
}

bool BackwardContext::needs_grad(std::size_t input) const {
  return input < inputs_.size() && inputs_[input] && inputs_[input]->requires_grad;
}

std::span<float> BackwardContext::grad_input(std::size_t input) {
  if (!needs_grad(input)) {
    throw InternalError("gradient requested for input that does not require one");
  }
  auto& node = *inputs_[input];
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0f);
  return node.grad;
}

Tensor make_op(const char* name, Shape shape, std::vector<float> value,
               std::vector<Tensor> inputs, BackwardFn backward, bool custom_grad) {
  if (detail::debug_scan.load(std::memory_order_relaxed)) detail::scan_finite(name, value);
  auto node = detail::new_node(std::move(shape), std::move(value));
  node->op = name;
  node->leaf = false;
  node->custom_grad = custom_grad;
  bool any = false;
  if (detail::grad_mode) {
    for (const auto& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return detail::grad_mode; }

NoGradGuard::NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
NoGradGuard::~NoGradGuard() { detail::grad_mode = previous_; }

void set_debug_checks(bool enabled) { detail::debug_scan.store(enabled); }
bool debug_checks() { return detail::debug_scan.load(); }

const Tensor& GradientMap::at(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) throw IndexError("no gradient recorded for tensor");
  return it->second;
}

const Tensor* GradientMap::find(const Tensor& param) const {
  auto it = grads_.find(param.id());
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientMap::insert(const Tensor& param, Tensor grad) {
  if (grad.shape() != param.shape()) {
    throw DimensionError("gradient shape " + shape_str(grad.shape()) + " does not match " +
                         shape_str(param.shape()));
  }
  grads_[param.id()] = std::move(grad);
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  GradientMap result;
  if (!loss.requires_grad()) return result;

  using detail::Node;
  // Iterative post-order DFS; a grey node seen again means a cycle.
  enum class Mark : unsigned char { Grey, Black };
  std::unordered_map<const Node*, Mark> marks;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  marks[loss.node_.get()] = Mark::Grey;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (!child->requires_grad) continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks.emplace(child, Mark::Grey);
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::Grey) {
        throw InternalError("cycle detected in autodiff tape");
      }
    } else {
      marks[node] = Mark::Black;
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node_->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->grad.empty()) continue;
    if (node->leaf) {
      result.grads_[node->id] =
          Tensor::from(node->shape, std::move(node->grad), false);
      node->grad = {};
      continue;
    }
    if (node->backward) {
      BackwardContext ctx(node->grad, node->value, node->inputs);
      node->backward(ctx);
    }
    std::vector<float>().swap(node->grad);
  }
  return result;
}

}  // namespace qvit
