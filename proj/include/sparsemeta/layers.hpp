#pragma once

#include <optional>
#include <string>

#include "sparsemeta/ops.hpp"
#include "sparsemeta/rng.hpp"

namespace sparsemeta {

// Constants of the closed-form KL approximation for the per-weight dropout
// posterior, plus the additive constant that pins KL -> 0 as alpha -> inf.
// Taken from the sparse-variational-dropout literature; kept in one record so
// checkpoints can declare which constants produced them.
struct SvdKlConstants {
  static constexpr int version = 1;
  static constexpr double k1 = 0.63576;
  static constexpr double k2 = 1.87320;
  static constexpr double k3 = 1.48695;
  static constexpr double c = -k1;
};

inline constexpr double kLogAlphaClip = 20.0;   // log alpha clamped to +-20
inline constexpr double kThetaClipEps = 1e-16;  // inside log(theta^2 + eps)
inline constexpr double kLrtVarianceFloor = 1e-12;  // under the LRT sqrt
inline constexpr double kDefaultPruneEta = 3.0;

enum class LayerKind { dense, conv3x3, batchnorm, relu, maxpool2x2, flatten };
enum class Mode { train, eval };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int in = 0;   // fan-in / input channels / normalized width
  int out = 0;  // fan-out / filter count
  bool variational = false;
};

// Per-weight Gaussian posterior: mean theta and log variance, with a
// deterministic bias. log alpha = log sigma^2 - log theta^2 is derived, never
// stored, so the optimizer works on unconstrained quantities.
struct VariationalParams {
  Tensor theta;
  Tensor log_sigma2;
  Tensor bias;  // optional
};

struct DeterministicParams {
  Tensor weight;
  Tensor bias;  // optional
};

Tensor log_alpha_of(const Tensor& theta, const Tensor& log_sigma2);

// Sum over the layer's weights of the closed-form KL approximation.
// Differentiable in theta and log_sigma2.
Tensor kl_divergence(const Tensor& theta, const Tensor& log_sigma2);
inline Tensor kl_divergence(const VariationalParams& layer) {
  return kl_divergence(layer.theta, layer.log_sigma2);
}

// Train mode samples pre-activations via the local reparameterization trick;
// eval mode propagates the mean with weights above the log-alpha threshold
// masked out.
Tensor forward_variational(const VariationalParams& layer, const Tensor& input, Mode mode,
                           RngStream* rng, double prune_eta = kDefaultPruneEta);
Tensor forward_variational_conv(const VariationalParams& layer, const Tensor& input, Mode mode,
                                RngStream* rng, double prune_eta = kDefaultPruneEta, int pad = 1);

// Constant 0/1 mask of weights kept at threshold eta (log alpha <= eta).
Tensor keep_mask(const Tensor& theta, const Tensor& log_sigma2, double eta);

struct ParamInfo {
  enum class Role { weight, theta, log_sigma2, bias, bn_gamma, bn_beta };
  std::string name;
  Role role;
  int layer = 0;
  Shape shape;
};

// Running batch-norm statistics, one slot per batchnorm layer. Only used when
// the trainer opts out of transductive (per-batch) normalization.
struct BnRunningStats {
  std::vector<std::vector<double>> mean, var;
  bool initialized = false;
  double momentum = 0.1;
};

// A feed-forward stack evaluated functionally: parameters are always passed
// in, never stored, so adapted copies can flow through the same model.
class Model {
 public:
  Model() = default;
  static Model build(std::vector<LayerSpec> specs);

  std::vector<Tensor> init_params(uint64_t seed, double log_sigma2_init = -10.0) const;

  Tensor forward(std::span<const Tensor> params, const Tensor& x, Mode mode,
                 RngStream* rng = nullptr, double prune_eta = kDefaultPruneEta,
                 BnRunningStats* bn = nullptr) const;

  const std::vector<LayerSpec>& specs() const { return specs_; }
  const std::vector<ParamInfo>& param_info() const { return infos_; }
  bool variational() const { return variational_; }
  int64_t scalar_count() const;  // total scalar parameters
  int batchnorm_layers() const { return bn_layers_; }

  // Views of the flat parameter list for each variational layer, in order.
  std::vector<VariationalParams> variational_views(std::span<const Tensor> params) const;

  // Sum of layer KL terms (scalar). Requires a variational model.
  Tensor total_kl(std::span<const Tensor> params) const;

 private:
  std::vector<LayerSpec> specs_;
  std::vector<ParamInfo> infos_;
  std::vector<int> param_offset_;  // first ParamInfo index per layer
  bool variational_ = false;
  int bn_layers_ = 0;
};

// Applies `variational` to every dense/conv spec, validates composition, and
// initializes parameters.
std::pair<Model, std::vector<Tensor>> build_model(std::vector<LayerSpec> specs, bool variational,
                                                  uint64_t init_seed,
                                                  double log_sigma2_init = -10.0);

}  // namespace sparsemeta
