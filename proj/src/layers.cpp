#include "sparsemeta/layers.hpp"

#include <cmath>

namespace sparsemeta {

namespace o = ops;

Tensor log_alpha_of(const Tensor& theta, const Tensor& log_sigma2) {
  if (theta.shape() != log_sigma2.shape())
    throw ShapeError("log_alpha: theta " + shape_str(theta.shape()) + " vs log_sigma2 " +
                     shape_str(log_sigma2.shape()));
  Tensor log_theta2 = o::log(o::add_scalar(o::square(theta), kThetaClipEps));
  return o::clamp(o::sub(log_sigma2, log_theta2), -kLogAlphaClip, kLogAlphaClip);
}

Tensor kl_divergence(const Tensor& theta, const Tensor& log_sigma2) {
  Tensor la = log_alpha_of(theta, log_sigma2);
  Tensor gate = o::mul_scalar(
      o::sigmoid(o::add_scalar(o::mul_scalar(la, SvdKlConstants::k3), SvdKlConstants::k2)),
      SvdKlConstants::k1);
  Tensor log1p_inv_alpha = o::log(o::add_scalar(o::exp(o::neg(la)), 1.0));
  // per weight: -(k1*sigmoid(k2+k3*la) - 0.5*log(1+1/alpha) + c), c = -k1
  Tensor per_weight = o::add_scalar(o::sub(o::mul_scalar(log1p_inv_alpha, 0.5), gate),
                                    SvdKlConstants::k1);
  return o::sum(per_weight);
}

Tensor keep_mask(const Tensor& theta, const Tensor& log_sigma2, double eta) {
  auto th = theta.data();
  auto ls = log_sigma2.data();
  std::vector<double> m(th.size());
  for (size_t i = 0; i < th.size(); ++i) {
    double la = ls[i] - std::log(th[i] * th[i] + kThetaClipEps);
    la = std::min(std::max(la, -kLogAlphaClip), kLogAlphaClip);
    m[i] = la > eta ? 0.0 : 1.0;
  }
  return Tensor::from(theta.shape(), std::move(m));
}

namespace {

Tensor lrt_sample(const Tensor& mean, const Tensor& var, RngStream* rng) {
  if (!rng) throw ValueError("forward_variational: train mode requires an rng stream");
  Tensor noise = Tensor::normal(*rng, mean.shape());
  Tensor std_dev = o::sqrt(o::add_scalar(var, kLrtVarianceFloor));
  return o::add(mean, o::mul(std_dev, noise));
}

}  // namespace

Tensor forward_variational(const VariationalParams& layer, const Tensor& input, Mode mode,
                           RngStream* rng, double prune_eta) {
  if (input.dim() != 2 || input.shape()[1] != layer.theta.shape()[0])
    throw ShapeError("forward_variational: input " + shape_str(input.shape()) +
                     " vs theta " + shape_str(layer.theta.shape()));
  if (mode == Mode::train) {
    Tensor mean = o::matmul(input, layer.theta);
    Tensor var = o::matmul(o::square(input), o::exp(layer.log_sigma2));
    Tensor out = lrt_sample(mean, var, rng);
    if (layer.bias.defined()) out = o::add(out, o::reshape(layer.bias, {1, layer.theta.shape()[1]}));
    return out;
  }
  Tensor masked = o::mul(layer.theta, keep_mask(layer.theta, layer.log_sigma2, prune_eta));
  return o::dense(input, masked, layer.bias);
}

Tensor forward_variational_conv(const VariationalParams& layer, const Tensor& input, Mode mode,
                                RngStream* rng, double prune_eta, int pad) {
  if (input.dim() != 4 || input.shape()[1] != layer.theta.shape()[1])
    throw ShapeError("forward_variational_conv: input " + shape_str(input.shape()) +
                     " vs theta " + shape_str(layer.theta.shape()));
  int filters = layer.theta.shape()[0];
  auto add_bias = [&](Tensor y) {
    if (layer.bias.defined()) y = o::add(y, o::reshape(layer.bias, {1, filters, 1, 1}));
    return y;
  };
  if (mode == Mode::train) {
    Tensor mean = o::conv2d(input, layer.theta, pad);
    Tensor var = o::conv2d(o::square(input), o::exp(layer.log_sigma2), pad);
    return add_bias(lrt_sample(mean, var, rng));
  }
  Tensor masked = o::mul(layer.theta, keep_mask(layer.theta, layer.log_sigma2, prune_eta));
  return add_bias(o::conv2d(input, masked, pad));
}

Model Model::build(std::vector<LayerSpec> specs) {
  if (specs.empty()) throw ValueError("Model::build: empty layer spec list");
  Model m;
  // composition check: track feature width through the stack. Spatial extents
  // are data-dependent and validated at forward time.
  enum class Stage { start, conv, dense } stage = Stage::start;
  int width = -1;  // -1: unknown (model input or post-flatten)
  int idx = 0;
  for (const auto& s : specs) {
    switch (s.kind) {
      case LayerKind::dense:
        if (s.in <= 0 || s.out <= 0) throw ValueError("dense layer needs positive fan-in/out");
        if (stage == Stage::dense && width >= 0 && width != s.in)
          throw ShapeError("layer " + std::to_string(idx) + ": dense fan-in " +
                           std::to_string(s.in) + " does not follow width " +
                           std::to_string(width));
        if (stage == Stage::conv)
          throw ShapeError("layer " + std::to_string(idx) + ": dense after conv needs flatten");
        stage = Stage::dense;
        width = s.out;
        break;
      case LayerKind::conv3x3:
        if (s.in <= 0 || s.out <= 0) throw ValueError("conv layer needs positive channel counts");
        if (stage == Stage::dense)
          throw ShapeError("layer " + std::to_string(idx) + ": conv cannot follow dense");
        if (stage == Stage::conv && width >= 0 && width != s.in)
          throw ShapeError("layer " + std::to_string(idx) + ": conv in-channels " +
                           std::to_string(s.in) + " do not follow " + std::to_string(width));
        stage = Stage::conv;
        width = s.out;
        break;
      case LayerKind::batchnorm:
        if (stage == Stage::start || s.in != width)
          throw ShapeError("layer " + std::to_string(idx) + ": batchnorm width mismatch");
        break;
      case LayerKind::maxpool2x2:
        if (stage != Stage::conv)
          throw ShapeError("layer " + std::to_string(idx) + ": maxpool outside conv stage");
        break;
      case LayerKind::flatten:
        if (stage != Stage::conv)
          throw ShapeError("layer " + std::to_string(idx) + ": flatten outside conv stage");
        stage = Stage::dense;
        width = -1;  // data-dependent; next dense is validated at forward
        break;
      case LayerKind::relu:
        if (stage == Stage::start)
          throw ShapeError("layer " + std::to_string(idx) + ": relu before any layer");
        break;
    }
    ++idx;
  }

  m.specs_ = std::move(specs);
  int layer = 0;
  for (const auto& s : m.specs_) {
    std::string base = (s.kind == LayerKind::dense    ? "dense"
                        : s.kind == LayerKind::conv3x3 ? "conv"
                        : s.kind == LayerKind::batchnorm ? "bn"
                                                         : "");
    base += std::to_string(layer);
    m.param_offset_.push_back(static_cast<int>(m.infos_.size()));
    using Role = ParamInfo::Role;
    if (s.kind == LayerKind::dense || s.kind == LayerKind::conv3x3) {
      Shape wshape = s.kind == LayerKind::dense ? Shape{s.in, s.out} : Shape{s.out, s.in, 3, 3};
      if (s.variational) {
        m.variational_ = true;
        m.infos_.push_back({base + ".theta", Role::theta, layer, wshape});
        m.infos_.push_back({base + ".log_sigma2", Role::log_sigma2, layer, wshape});
      } else {
        m.infos_.push_back({base + ".weight", Role::weight, layer, wshape});
      }
      m.infos_.push_back({base + ".bias", Role::bias, layer, {s.out}});
    } else if (s.kind == LayerKind::batchnorm) {
      m.infos_.push_back({base + ".gamma", Role::bn_gamma, layer, {s.in}});
      m.infos_.push_back({base + ".beta", Role::bn_beta, layer, {s.in}});
      ++m.bn_layers_;
    }
    ++layer;
  }
  return m;
}

std::vector<Tensor> Model::init_params(uint64_t seed, double log_sigma2_init) const {
  // theta draws are identical between deterministic and variational flavors
  // of the same architecture: log_sigma2 and biases consume no randomness.
  RngStream rng = RngStream(seed).split(0x1717);
  std::vector<Tensor> params;
  params.reserve(infos_.size());
  for (const auto& info : infos_) {
    using Role = ParamInfo::Role;
    switch (info.role) {
      case Role::weight:
      case Role::theta: {
        const auto& s = info.shape;
        int fan_in = s.size() == 2 ? s[0] : s[1] * s[2] * s[3];
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        params.push_back(Tensor::uniform(rng, info.shape, -bound, bound));
        break;
      }
      case Role::log_sigma2:
        params.push_back(Tensor::full(info.shape, log_sigma2_init));
        break;
      case Role::bias:
      case Role::bn_beta:
        params.push_back(Tensor::zeros(info.shape));
        break;
      case Role::bn_gamma:
        params.push_back(Tensor::full(info.shape, 1.0));
        break;
    }
    params.back().set_requires_grad(true);
  }
  return params;
}

int64_t Model::scalar_count() const {
  int64_t n = 0;
  for (const auto& info : infos_) n += numel(info.shape);
  return n;
}

Tensor Model::forward(std::span<const Tensor> params, const Tensor& x, Mode mode, RngStream* rng,
                      double prune_eta, BnRunningStats* bn) const {
  if (params.size() != infos_.size())
    throw ValueError("Model::forward: expected " + std::to_string(infos_.size()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  Tensor h = x;
  int bn_slot = 0;
  for (size_t layer = 0; layer < specs_.size(); ++layer) {
    const LayerSpec& s = specs_[layer];
    int off = param_offset_[layer];
    switch (s.kind) {
      case LayerKind::dense: {
        if (h.dim() != 2 || h.shape()[1] != s.in)
          throw ShapeError("layer " + std::to_string(layer) + " (dense): input " +
                           shape_str(h.shape()) + " vs fan-in " + std::to_string(s.in));
        if (s.variational) {
          VariationalParams vp{params[off], params[off + 1], params[off + 2]};
          h = forward_variational(vp, h, mode, rng, prune_eta);
        } else {
          h = o::dense(h, params[off], params[off + 1]);
        }
        break;
      }
      case LayerKind::conv3x3: {
        if (s.variational) {
          VariationalParams vp{params[off], params[off + 1], params[off + 2]};
          h = forward_variational_conv(vp, h, mode, rng, prune_eta, 1);
        } else {
          h = o::conv2d(h, params[off], 1);
          h = o::add(h, o::reshape(params[off + 1], {1, s.out, 1, 1}));
        }
        break;
      }
      case LayerKind::batchnorm: {
        if (bn && mode == Mode::eval && bn->initialized) {
          Shape red = h.dim() == 4 ? Shape{1, s.in, 1, 1} : Shape{1, s.in};
          Tensor mu = Tensor::from(red, bn->mean[bn_slot]);
          Tensor sd = Tensor::from(red, bn->var[bn_slot]);
          Tensor y = o::div(o::sub(h, o::broadcast_to(mu, h.shape())),
                            o::broadcast_to(o::sqrt(o::add_scalar(sd, 1e-5)), h.shape()));
          h = o::add(o::mul(y, o::broadcast_to(o::reshape(params[off], red), h.shape())),
                     o::broadcast_to(o::reshape(params[off + 1], red), h.shape()));
        } else {
          if (bn && mode == Mode::train) {
            // accumulate per-channel batch statistics outside the graph
            if (!bn->initialized) {
              bn->mean.assign(bn_layers_, {});
              bn->var.assign(bn_layers_, {});
            }
            int C = s.in;
            std::vector<double> mu(C, 0.0), va(C, 0.0);
            auto d = h.data();
            int64_t per = h.size() / C;
            if (h.dim() == 4) {
              int64_t hw = static_cast<int64_t>(h.shape()[2]) * h.shape()[3];
              for (int64_t i = 0; i < h.size(); ++i) mu[(i / hw) % C] += d[i];
              for (int c = 0; c < C; ++c) mu[c] /= static_cast<double>(per);
              for (int64_t i = 0; i < h.size(); ++i) {
                double dx = d[i] - mu[(i / hw) % C];
                va[(i / hw) % C] += dx * dx;
              }
            } else {
              for (int64_t i = 0; i < h.size(); ++i) mu[i % C] += d[i];
              for (int c = 0; c < C; ++c) mu[c] /= static_cast<double>(per);
              for (int64_t i = 0; i < h.size(); ++i) {
                double dx = d[i] - mu[i % C];
                va[i % C] += dx * dx;
              }
            }
            for (int c = 0; c < C; ++c) va[c] /= static_cast<double>(per);
            if (bn->mean[bn_slot].empty()) {
              bn->mean[bn_slot] = mu;
              bn->var[bn_slot] = va;
            } else {
              for (int c = 0; c < C; ++c) {
                bn->mean[bn_slot][c] += bn->momentum * (mu[c] - bn->mean[bn_slot][c]);
                bn->var[bn_slot][c] += bn->momentum * (va[c] - bn->var[bn_slot][c]);
              }
            }
            bn->initialized = true;
          }
          h = o::batch_norm(h, params[off], params[off + 1]);
        }
        ++bn_slot;
        break;
      }
      case LayerKind::relu:
        h = o::relu(h);
        break;
      case LayerKind::maxpool2x2:
        if (h.dim() == 4 && (h.shape()[2] < 2 || h.shape()[3] < 2))
          throw ShapeError("layer " + std::to_string(layer) + ": spatial extent collapsed");
        h = o::maxpool2x2(h);
        break;
      case LayerKind::flatten: {
        if (h.dim() != 4) throw ShapeError("flatten: expected rank-4 input");
        h = o::reshape(h, {h.shape()[0], static_cast<int>(h.size()) / h.shape()[0]});
        break;
      }
    }
    if (!all_finite(h.data()))
      throw ValueError("layer " + std::to_string(layer) + ": non-finite activation");
  }
  return h;
}

std::vector<VariationalParams> Model::variational_views(std::span<const Tensor> params) const {
  std::vector<VariationalParams> out;
  for (size_t layer = 0; layer < specs_.size(); ++layer) {
    const LayerSpec& s = specs_[layer];
    if ((s.kind == LayerKind::dense || s.kind == LayerKind::conv3x3) && s.variational) {
      int off = param_offset_[layer];
      out.push_back({params[off], params[off + 1], params[off + 2]});
    }
  }
  return out;
}

Tensor Model::total_kl(std::span<const Tensor> params) const {
  if (!variational_) throw ValueError("total_kl: model is not variational");
  Tensor acc;
  for (const auto& vp : variational_views(params)) {
    Tensor kl = kl_divergence(vp);
    acc = acc.defined() ? o::add(acc, kl) : kl;
  }
  return acc;
}

std::pair<Model, std::vector<Tensor>> build_model(std::vector<LayerSpec> specs, bool variational,
                                                  uint64_t init_seed, double log_sigma2_init) {
  for (auto& s : specs)
    if (s.kind == LayerKind::dense || s.kind == LayerKind::conv3x3) s.variational = variational;
  Model m = Model::build(std::move(specs));
  auto params = m.init_params(init_seed, log_sigma2_init);
  return {std::move(m), std::move(params)};
}

}  // namespace sparsemeta
