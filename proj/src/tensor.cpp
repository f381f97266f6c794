#include "sparsemeta/tensor.hpp"

namespace sparsemeta {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_next_id{1};
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

GradMode::GradMode(bool on) : prev_(g_grad_enabled) { g_grad_enabled = on; }
GradMode::~GradMode() { g_grad_enabled = prev_; }

uint64_t next_tensor_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(numel(shape)), value);
  impl->shape = std::move(shape);
  impl->id = next_tensor_id();
  return wrap(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->id = next_tensor_id();
  return wrap(std::move(impl));
}

Tensor Tensor::uniform(RngStream& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return from(std::move(shape), std::move(v));
}

Tensor Tensor::normal(RngStream& rng, Shape shape, double mean, double stddev) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = mean + stddev * rng.normal();
  return from(std::move(shape), std::move(v));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->id = next_tensor_id();
  return wrap(std::move(impl));
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&,
                                                 const Tensor&)>
                   backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->id = next_tensor_id();

  bool record = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs)
      if (in.requires_grad()) {
        record = true;
        break;
      }
  }
  if (record) {
    impl->requires_grad = true;
    auto node = std::make_shared<BackwardNode>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->out = impl;
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor::wrap(std::move(impl));
}

}  // namespace sparsemeta
