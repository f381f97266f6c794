#pragma once

#include <functional>
#include <string>
#include <utility>

#include "sparsemeta/tensor.hpp"

namespace sparsemeta {

// A recorded forward pass: the root output plus every tensor reachable from
// it, in topological order (inputs of an op always precede it).
struct Tape {
  Tensor root;
  std::vector<std::shared_ptr<TensorImpl>> order;
};

using GraphFn = std::function<Tensor(std::span<const Tensor>)>;

// Run fn with recording enabled and capture the tape.
std::pair<Tensor, Tape> forward(const GraphFn& fn, std::span<const Tensor> inputs);

// Reverse-mode gradients of a scalar output with respect to each wrt tensor.
// With create_graph the returned gradients are recorded ops themselves, so a
// second grad() call differentiates through them.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph = false);
std::vector<Tensor> grad(const Tape& tape, std::span<const Tensor> wrt,
                         bool create_graph = false);

Tape trace(const Tensor& output);

// Stable fingerprint of a recorded graph: op sequence, shapes and value bits.
// Two runs with identical seeds must produce identical signatures.
std::string graph_signature(const Tensor& output);

}  // namespace sparsemeta
