#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "stylemorph/core/rng.hpp"

namespace stylemorph {

class Tensor;

namespace detail {

// Recycles data buffers between tensors of the same size. Graph churn during
// training allocates the same handful of shapes every iteration; handing back
// a warm buffer avoids the allocate, zero, page-fault, unmap cycle glibc runs
// for large blocks. Buffers come back with unspecified contents.
class BufferPool {
 public:
  std::vector<double> acquire(size_t n) {
    auto it = bins_.find(n);
    if (it != bins_.end() && !it->second.empty()) {
      std::vector<double> v = std::move(it->second.back());
      it->second.pop_back();
      held_ -= n;
      return v;
    }
    return std::vector<double>(n);
  }

  void release(std::vector<double>&& v) {
    const size_t n = v.size();
    if (n == 0) return;
    auto& bin = bins_[n];
    if (bin.size() >= kBinCap || held_ + n > kByteBudget / sizeof(double)) return;
    held_ += n;
    bin.push_back(std::move(v));
  }

 private:
  static constexpr size_t kBinCap = 64;
  static constexpr size_t kByteBudget = size_t{3} << 30;
  std::unordered_map<size_t, std::vector<std::vector<double>>> bins_;
  size_t held_ = 0;  // doubles currently parked
};

inline BufferPool& buffer_pool() {
  thread_local BufferPool pool;
  return pool;
}

// Pooled buffer with unspecified contents; caller overwrites every element.
inline std::vector<double> uninit_buffer(size_t n) { return buffer_pool().acquire(n); }

inline std::vector<double> zero_buffer(size_t n) {
  std::vector<double> v = buffer_pool().acquire(n);
  std::fill(v.begin(), v.end(), 0.0);
  return v;
}

}  // namespace detail

// Thread-local switch: when off, ops produce plain values with no graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct GradFn;

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<GradFn> grad_fn;       // null for leaves and constants
  std::shared_ptr<TensorNode> grad;      // filled by backward() on leaves

  TensorNode() = default;
  ~TensorNode() { detail::buffer_pool().release(std::move(data)); }
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;
};

// Shared handle to a node in the computation graph. Copies alias.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }

  static int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto node = std::make_shared<TensorNode>();
    node->data = detail::zero_buffer(static_cast<size_t>(shape_numel(shape)));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor ones(std::vector<int> shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }

  static Tensor scalar(double value) { return full({1}, value); }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor::from_data: size does not match shape");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor randn(std::vector<int> shape, SeededRng& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.node_->data) v = rng.normal();
    return t;
  }

  const std::vector<int>& shape() const { return check()->shape; }
  int dim(int i) const { return check()->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(check()->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(check()->data.size()); }

  std::vector<double>& data() { return check()->data; }
  const std::vector<double>& data() const { return check()->data; }
  double* ptr() { return check()->data.data(); }
  const double* ptr() const { return check()->data.data(); }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return check()->requires_grad; }
  void set_requires_grad(bool v) {
    if (check()->grad_fn) throw std::invalid_argument("set_requires_grad: not a leaf");
    node_->requires_grad = v;
  }

  const std::shared_ptr<GradFn>& grad_fn() const { return check()->grad_fn; }

  // Gradient accumulated by autograd::backward. Undefined until then.
  Tensor grad() const { return Tensor(check()->grad); }
  void zero_grad() { check()->grad.reset(); }

  // Fresh leaf with copied data and no history.
  Tensor clone(bool requires_grad = false) const {
    Tensor t = from_data(shape(), data(), requires_grad);
    return t;
  }

  // Same data viewed as a constant (shares nothing with the graph).
  Tensor detach() const { return clone(false); }

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& handle() const { return node_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < check()->shape.size(); ++i) {
      if (i) os << ',';
      os << node_->shape[i];
    }
    os << ']';
    return os.str();
  }

 private:
  std::shared_ptr<TensorNode> node_;

  const std::shared_ptr<TensorNode>& check() const {
    if (!node_) throw std::invalid_argument("Tensor: use of undefined tensor");
    return node_;
  }
};

// Backward rule attached to a non-leaf node. The lambda receives the gradient
// of the loss w.r.t. this node's output and returns gradients w.r.t. each
// input, built out of ordinary ops so they can themselves be differentiated.
// The backward rule receives the output gradient and a per-input mask saying
// which input gradients will actually be consumed; a rule may return an
// undefined Tensor in any masked-off slot.
struct GradFn {
  const char* name;
  std::vector<Tensor> inputs;
  std::function<std::vector<Tensor>(const Tensor&, const std::vector<char>&)> backward;
};

namespace detail {

// Wraps a computed value as a graph node when grad mode is on and any input
// participates in the graph; otherwise returns a plain constant. The
// backward callable may take just the output gradient or additionally the
// per-input needs mask.
template <class F>
inline Tensor make_op(const char* name, std::vector<int> shape, std::vector<double> data,
                      std::vector<Tensor> inputs, F&& backward) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  if (!grad_mode()) return out;
  bool needs = false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) {
      needs = true;
      break;
    }
  if (!needs) return out;
  auto fn = std::make_shared<GradFn>();
  fn->name = name;
  fn->inputs = std::move(inputs);
  if constexpr (std::is_invocable_v<F, const Tensor&, const std::vector<char>&>) {
    fn->backward = std::forward<F>(backward);
  } else {
    fn->backward = [f = std::forward<F>(backward)](const Tensor& g, const std::vector<char>&) {
      return f(g);
    };
  }
  out.node()->requires_grad = true;
  out.node()->grad_fn = std::move(fn);
  return out;
}

}  // namespace detail

}  // namespace stylemorph
