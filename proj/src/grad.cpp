#include "sparsemeta/grad.hpp"

#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "sparsemeta/ops.hpp"

namespace sparsemeta {

Tape trace(const Tensor& output) {
  Tape tape;
  tape.root = output;
  if (!output.defined()) return tape;
  std::unordered_set<const TensorImpl*> seen;
  // iterative post-order DFS; child visit order follows the op's input order,
  // which makes the tape deterministic for a given graph
  struct Frame {
    std::shared_ptr<TensorImpl> impl;
    size_t next_child = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({output.impl_ptr()});
  seen.insert(output.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& node = f.impl->node;
    size_t n_children = node ? node->inputs.size() : 0;
    if (f.next_child < n_children) {
      const Tensor& child = node->inputs[f.next_child++];
      if (child.defined() && !seen.count(child.impl())) {
        seen.insert(child.impl());
        stack.push_back({child.impl_ptr()});
      }
    } else {
      tape.order.push_back(f.impl);
      stack.pop_back();
    }
  }
  return tape;
}

std::pair<Tensor, Tape> forward(const GraphFn& fn, std::span<const Tensor> inputs) {
  GradMode mode(true);
  Tensor out = fn(inputs);
  return {out, trace(out)};
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
  return grad(trace(output), wrt, create_graph);
}

std::vector<Tensor> grad(const Tape& tape, std::span<const Tensor> wrt, bool create_graph) {
  const Tensor& output = tape.root;
  if (!output.defined() || output.size() != 1)
    throw ValueError("grad: output must be a defined scalar");

  std::unordered_set<const TensorImpl*> on_tape;
  for (const auto& impl : tape.order) on_tape.insert(impl.get());
  for (const Tensor& w : wrt) {
    if (!w.defined() || !w.requires_grad())
      throw ValueError("grad: wrt tensor does not require grad");
    if (!on_tape.count(w.impl())) throw ValueError("grad: wrt tensor is not on the tape");
  }

  std::unordered_map<const TensorImpl*, Tensor> grads;
  grads[output.impl()] = Tensor::scalar(1.0);

  {
    GradMode mode(create_graph);
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
      const auto& impl = *it;
      if (!impl->node) continue;
      auto found = grads.find(impl.get());
      if (found == grads.end()) continue;  // no path from the output
      Tensor g = found->second;
      Tensor out_t = Tensor::wrap(impl);
      std::vector<Tensor> in_grads = impl->node->backward(impl->node->inputs, out_t, g);
      for (size_t i = 0; i < in_grads.size(); ++i) {
        if (!in_grads[i].defined()) continue;
        const Tensor& in = impl->node->inputs[i];
        if (!in.requires_grad()) continue;
        auto slot = grads.find(in.impl());
        if (slot == grads.end())
          grads.emplace(in.impl(), in_grads[i]);
        else
          slot->second = ops::add(slot->second, in_grads[i]);
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    auto found = grads.find(w.impl());
    out.push_back(found != grads.end() ? found->second : Tensor::zeros(w.shape()));
  }
  return out;
}

std::string graph_signature(const Tensor& output) {
  Tape tape = trace(output);
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix_bytes = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  std::string sig;
  for (const auto& impl : tape.order) {
    sig += impl->node ? impl->node->op : "leaf";
    sig += shape_str(impl->shape);
    sig += '|';
    mix_bytes(impl->data.data(), impl->data.size() * sizeof(double));
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "#%016llx", static_cast<unsigned long long>(h));
  sig += buf;
  return sig;
}

}  // namespace sparsemeta
