#include "sparsemeta/models.hpp"

namespace sparsemeta {

std::pair<Model, std::vector<Tensor>> sinusoid_mlp(bool variational, uint64_t seed,
                                                   double log_sigma2_init) {
  std::vector<LayerSpec> specs{
      {LayerKind::dense, 1, 40},   {LayerKind::relu},
      {LayerKind::dense, 40, 40},  {LayerKind::relu},
      {LayerKind::dense, 40, 1},
  };
  return build_model(std::move(specs), variational, seed, log_sigma2_init);
}

std::pair<Model, std::vector<Tensor>> conv4(const ModelConfig& config, uint64_t seed) {
  if (config.n_way < 2) throw ValueError("conv4: n_way must be >= 2");
  if (config.filters < 1) throw ValueError("conv4: filters must be >= 1");
  if (config.input_extent % 16 != 0)
    throw ValueError("conv4: input extent " + std::to_string(config.input_extent) +
                     " not divisible by 16 (four 2x2 pools)");
  int f = config.filters;
  std::vector<LayerSpec> specs;
  int c = config.in_channels;
  for (int block = 0; block < 4; ++block) {
    specs.push_back({LayerKind::conv3x3, c, f});
    specs.push_back({LayerKind::batchnorm, f, f});
    specs.push_back({LayerKind::relu});
    specs.push_back({LayerKind::maxpool2x2});
    c = f;
  }
  specs.push_back({LayerKind::flatten});
  int side = config.input_extent / 16;
  specs.push_back({LayerKind::dense, f * side * side, config.n_way});
  return build_model(std::move(specs), config.variational, seed, config.log_sigma2_init);
}

std::pair<Model, std::vector<Tensor>> make_model(const ModelConfig& config, uint64_t seed) {
  if (config.architecture == Architecture::sinusoid_mlp)
    return sinusoid_mlp(config.variational, seed, config.log_sigma2_init);
  return conv4(config, seed);
}

}  // namespace sparsemeta
