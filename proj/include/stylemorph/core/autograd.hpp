#pragma once

#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stylemorph/core/ops.hpp"
#include "stylemorph/core/tensor.hpp"

namespace stylemorph::autograd {

namespace detail {

// Reverse-postorder over the op graph: every node appears after all nodes
// that consume it, so one reverse sweep propagates all gradients.
inline std::vector<TensorNode*> topo_order(const Tensor& root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    size_t next_input;
  };
  std::vector<Frame> stack;
  if (!root.requires_grad()) return order;
  stack.push_back({root.node(), 0});
  visited.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    GradFn* fn = f.node->grad_fn.get();
    size_t arity = fn ? fn->inputs.size() : 0;
    if (f.next_input < arity) {
      TensorNode* child = fn->inputs[f.next_input++].node();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

inline void accumulate(std::unordered_map<TensorNode*, Tensor>& grads, TensorNode* node,
                       const Tensor& g) {
  auto it = grads.find(node);
  if (it == grads.end()) {
    grads.emplace(node, g);
  } else {
    it->second = ops::add(it->second, g);
  }
}

// With a target set, backward work is pruned to nodes from which some target
// is reachable, and each rule is told which of its input gradients will be
// consumed; everything else is never computed.
inline std::unordered_map<TensorNode*, Tensor> run_backward(
    const Tensor& output, bool create_graph,
    const std::vector<Tensor>* targets = nullptr) {
  if (output.numel() != 1)
    throw std::invalid_argument("autograd: output must be scalar");
  std::unordered_map<TensorNode*, Tensor> grads;
  if (!output.requires_grad()) return grads;
  std::vector<TensorNode*> order = detail::topo_order(output);

  std::unordered_set<TensorNode*> needed;
  if (targets) {
    std::unordered_set<TensorNode*> tset;
    for (const Tensor& t : *targets) tset.insert(t.node());
    // Inputs precede consumers in order, so one forward sweep settles
    // "reaches a target" bottom-up.
    for (TensorNode* node : order) {
      bool hit = tset.count(node) != 0;
      if (!hit && node->grad_fn)
        for (const Tensor& in : node->grad_fn->inputs)
          if (needed.count(in.node())) {
            hit = true;
            break;
          }
      if (hit) needed.insert(node);
    }
  }
  auto wanted = [&](TensorNode* n) { return !targets || needed.count(n) != 0; };

  grads.emplace(output.node(), Tensor::ones({1}));
  // With create_graph the backward rules run under grad mode and their
  // results stay connected to the original graph; without it everything
  // they produce is a plain constant.
  bool prev_mode = grad_mode();
  grad_mode() = create_graph;
  try {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* node = *it;
      GradFn* fn = node->grad_fn.get();
      if (!fn || !wanted(node)) continue;
      auto gslot = grads.find(node);
      if (gslot == grads.end()) continue;
      std::vector<char> need(fn->inputs.size());
      for (size_t i = 0; i < fn->inputs.size(); ++i)
        need[i] = fn->inputs[i].requires_grad() && wanted(fn->inputs[i].node());
      std::vector<Tensor> input_grads = fn->backward(gslot->second, need);
      if (input_grads.size() != fn->inputs.size())
        throw std::logic_error(std::string("autograd: arity mismatch in op ") + fn->name);
      for (size_t i = 0; i < input_grads.size(); ++i) {
        if (!need[i]) continue;
        if (!input_grads[i].defined())
          throw std::logic_error(std::string("autograd: op ") + fn->name +
                                 " returned no gradient for a needed input");
        accumulate(grads, fn->inputs[i].node(), input_grads[i]);
      }
    }
  } catch (...) {
    grad_mode() = prev_mode;
    throw;
  }
  grad_mode() = prev_mode;
  return grads;
}

}  // namespace detail

// Gradients of a scalar output w.r.t. the given tensors. Tensors the output
// does not depend on get zero gradients. With create_graph the returned
// tensors are differentiable functions of the original graph's leaves.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                                bool create_graph = false) {
  auto grads = detail::run_backward(output, create_graph, &wrt);
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    auto it = grads.find(t.node());
    result.push_back(it != grads.end() ? it->second : Tensor::zeros(t.shape()));
  }
  return result;
}

// Accumulates gradients of a scalar loss into the .grad buffers of every
// reachable leaf, like a classic backward pass.
inline void backward(const Tensor& loss) {
  auto grads = detail::run_backward(loss, false);
  for (auto& [node, g] : grads) {
    if (!node->requires_grad || node->grad_fn) continue;
    if (!node->grad) {
      node->grad = std::make_shared<TensorNode>();
      node->grad->shape = node->shape;
      node->grad->data.assign(node->data.size(), 0.0);
    }
    const double* src = g.ptr();
    for (size_t i = 0; i < node->grad->data.size(); ++i) node->grad->data[i] += src[i];
  }
}

}  // namespace stylemorph::autograd
