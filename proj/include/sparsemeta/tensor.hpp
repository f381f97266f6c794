#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "sparsemeta/common.hpp"
#include "sparsemeta/rng.hpp"

namespace sparsemeta {

class Tensor;
struct TensorImpl;

// Backward rule of one recorded primitive. `inputs` are the operands the
// forward pass consumed; `out` is the op's own result (weak, to break the
// ownership cycle); `backward` maps the gradient at the output to gradients
// at each input, aligned with `inputs`. An undefined tensor in the result
// means "no gradient for this input".
//
// Backward rules are themselves written in terms of primitives, so running
// them with recording enabled yields a differentiable gradient graph
// (create_graph) and second-order derivatives fall out of the same machinery.
struct BackwardNode {
  const char* op = "";
  std::vector<Tensor> inputs;
  std::weak_ptr<TensorImpl> out;
  std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs, const Tensor& out,
                                    const Tensor& grad_out)>
      backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<BackwardNode> node;  // null for leaves and constants
  uint64_t id = 0;                     // creation order, per process
};

// Dense 64-bit tensor handle. Value semantics on the handle; the storage is
// shared and treated as immutable once the tensor participates in a graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor uniform(RngStream& rng, Shape shape, double lo, double hi);
  static Tensor normal(RngStream& rng, Shape shape, double mean = 0.0, double stddev = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
  int dim() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const double> data() const { return impl_->data; }
  // Mutation is only legal before the tensor enters any graph.
  std::span<double> mutable_data() { return impl_->data; }

  double item() const {
    if (size() != 1) throw ValueError("item(): tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
  }
  double at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  // Leaf copy sharing no graph history (stop-gradient).
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local recording switch. Ops record a BackwardNode only when enabled
// and at least one input requires grad.
bool grad_enabled();

struct GradMode {
  explicit GradMode(bool on);
  ~GradMode();
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool prev_;
};

struct NoGradGuard : GradMode {
  NoGradGuard() : GradMode(false) {}
};

// Core of every primitive: materialize the forward value and, when recording,
// attach the backward rule.
Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&,
                                                 const Tensor&)>
                   backward);

uint64_t next_tensor_id();

}  // namespace sparsemeta
