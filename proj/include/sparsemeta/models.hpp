#pragma once

#include "sparsemeta/layers.hpp"

namespace sparsemeta {

enum class Architecture { sinusoid_mlp, conv4 };

struct ModelConfig {
  Architecture architecture = Architecture::sinusoid_mlp;
  bool variational = false;
  int n_way = 5;        // classification output width
  int filters = 32;     // per convolutional layer
  int in_channels = 1;
  int input_extent = 16;  // square input, must survive four 2x2 pools
  double log_sigma2_init = -10.0;
};

// 1 -> 40 -> 40 -> 1 regression network, ReLU hidden, linear head.
std::pair<Model, std::vector<Tensor>> sinusoid_mlp(bool variational, uint64_t seed,
                                                   double log_sigma2_init = -10.0);

// Four blocks of conv3x3 (pad 1) -> batchnorm -> relu -> maxpool2x2, then a
// flattened dense head to n_way logits.
std::pair<Model, std::vector<Tensor>> conv4(const ModelConfig& config, uint64_t seed);

std::pair<Model, std::vector<Tensor>> make_model(const ModelConfig& config, uint64_t seed);

}  // namespace sparsemeta
