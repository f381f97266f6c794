#include <doctest.h>

#include <cstring>

#include "oracles.hpp"
#include "sparsemeta/grad.hpp"
#include "sparsemeta/ops.hpp"

using namespace sparsemeta;
namespace o = ops;

namespace {

Tensor param(Shape shape, std::vector<double> v) {
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor random_param(RngStream& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::uniform(rng, std::move(shape), lo, hi);
  t.set_requires_grad(true);
  return t;
}

// FD check of a graph-building function against the analytic gradients.
void check_grads(const std::function<Tensor(const std::vector<Tensor>&)>& build,
                 const std::vector<Tensor>& params, double tol = 1e-5, double eps = 1e-5) {
  Tensor loss = build(params);
  auto gs = grad(loss, params);
  auto fd = oracles::fd_gradient(
      [&](const std::vector<Tensor>& ps) {
        NoGradGuard ng;
        return build(ps).item();
      },
      params, eps);
  for (size_t k = 0; k < params.size(); ++k) {
    double err = oracles::max_rel_err(gs[k], fd[k]);
    CAPTURE(k);
    CHECK(err <= tol);
  }
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("forward: squared scalar") {
  Tensor x = param({1}, {3.0});
  auto [y, tape] = forward([](std::span<const Tensor> in) { return o::square(in[0]); },
                            std::vector<Tensor>{x});
  CHECK(y.item() == doctest::Approx(9.0));
  CHECK(tape.order.size() >= 2);
}

TEST_CASE("forward: sum of elementwise square") {
  Tensor x = param({2}, {1.0, 2.0});
  Tensor y = o::sum(o::mul(x, x));
  CHECK(y.item() == doctest::Approx(5.0));
}

TEST_CASE("tape is topologically ordered") {
  Tensor x = param({2}, {0.5, -1.5});
  Tensor y = o::sum(o::mul(o::add_scalar(x, 1.0), x));
  Tape tape = trace(y);
  // every node's inputs appear before the node itself
  std::vector<const TensorImpl*> seen;
  for (const auto& impl : tape.order) {
    if (impl->node)
      for (const auto& in : impl->node->inputs) {
        bool found = false;
        for (auto* s : seen) found |= (s == in.impl());
        CHECK(found);
      }
    seen.push_back(impl.get());
  }
  CHECK(tape.root.impl() == tape.order.back().get());
}

TEST_CASE("grad: d/dx x^2 = 2x") {
  Tensor x = param({1}, {3.0});
  Tensor y = o::square(x);
  auto g = grad(y, std::vector<Tensor>{x});
  CHECK(g[0].item() == doctest::Approx(6.0));
}

TEST_CASE("grad of grad: d2/dx2 x^3 = 6x") {
  Tensor x = param({1}, {2.0});
  Tensor y = o::mul(o::square(x), x);
  auto g1 = grad(y, std::vector<Tensor>{x}, /*create_graph=*/true);
  CHECK(g1[0].item() == doctest::Approx(12.0));
  CHECK(g1[0].requires_grad());
  auto g2 = grad(g1[0], std::vector<Tensor>{x});
  CHECK(g2[0].item() == doctest::Approx(12.0));  // 6x at x=2
  CHECK_FALSE(g2[0].requires_grad());
}

TEST_CASE("one-inner-step meta-gradient on a linear model matches FD") {
  // w adapted by one SGD step on (x1,y1), then evaluated on (x2,y2); the
  // derivative of the post-adaptation loss w.r.t. the initial w needs a
  // second-order sweep.
  const double gamma = 0.4, x1 = 1.3, y1 = 0.7, x2 = -2.0, y2 = 1.1;
  auto build = [&](const std::vector<Tensor>& ps) {
    Tensor w = ps[0];
    Tensor inner = o::square(o::add_scalar(o::mul_scalar(w, x1), -y1));
    Tensor gw = grad(inner, std::vector<Tensor>{w}, true)[0];
    Tensor w1 = o::sub(w, o::mul_scalar(gw, gamma));
    return o::square(o::add_scalar(o::mul_scalar(w1, x2), -y2));
  };
  std::vector<Tensor> params{param({1}, {0.3})};
  Tensor loss = build(params);
  auto g = grad(loss, params);
  auto fd = oracles::fd_gradient(
      [&](const std::vector<Tensor>& ps) { return build(ps).item(); }, params, 1e-5);
  CHECK(oracles::rel_err(g[0].item(), fd[0][0]) <= 1e-5);
}

TEST_CASE("finite differences: elementwise binaries with broadcasting") {
  RngStream rng(7);
  Tensor a = random_param(rng, {3, 4});
  Tensor b = random_param(rng, {3, 4});
  Tensor row = random_param(rng, {1, 4});
  Tensor s = random_param(rng, {1});
  Tensor bpos = random_param(rng, {3, 4}, 0.5, 2.0);  // away from zero for div

  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::add(p[0], p[1])); }, {a, b});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::sub(p[0], p[1])); }, {a, row});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::mul(p[0], p[1])); }, {a, b});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::mul(p[0], p[1])); }, {a, s});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::div(p[0], p[1])); }, {a, bpos});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::div(p[0], p[1])); },
              {row, bpos});
}

TEST_CASE("finite differences: unary primitives") {
  RngStream rng(11);
  Tensor x = random_param(rng, {2, 5});
  Tensor pos = random_param(rng, {2, 5}, 0.2, 3.0);
  Tensor off_kink = random_param(rng, {2, 5}, 0.1, 1.0);  // relu tested away from 0

  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::neg(p[0])); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::add_scalar(p[0], 2.5)); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::mul_scalar(p[0], -1.7)); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::scalar_sub(1.0, p[0])); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::relu(p[0])); }, {off_kink});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::sigmoid(p[0])); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::log(p[0])); }, {pos}, 1e-5,
              1e-6);
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::exp(p[0])); }, {x});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::sqrt(p[0])); }, {pos});
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::square(p[0])); }, {x});
  // clamp: elements strictly inside / outside the band, not at its edges
  check_grads([](const std::vector<Tensor>& p) { return o::sum(o::clamp(p[0], -0.55, 0.55)); },
              {x}, 1e-5, 1e-7);
}

TEST_CASE("finite differences: reductions and shape ops") {
  RngStream rng(13);
  Tensor x = random_param(rng, {3, 4});
  Tensor y4 = random_param(rng, {2, 3, 2, 2});
  Tensor r = Tensor::uniform(rng, {3, 4}, -1.0, 1.0);
  Tensor r2 = Tensor::uniform(rng, {2, 3, 4}, -1.0, 1.0);

  check_grads([](const std::vector<Tensor>& p) { return o::mean(p[0]); }, {x});
  check_grads([&](const std::vector<Tensor>& p) { return o::sum(o::mul(o::reshape(p[0], {4, 3}), o::transpose(r))); },
              {x});
  check_grads([&](const std::vector<Tensor>& p) { return o::sum(o::mul(o::transpose(p[0]), o::transpose(r))); },
              {x});
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::square(o::broadcast_to(o::sum_to(p[0], {1, 4}), {2, 4})));
  },
              {x});
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::mul(o::broadcast_to(p[0], {2, 3, 4}), r2));
  },
              {random_param(rng, {3, 1})});
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::square(o::permute(p[0], {2, 0, 3, 1})));
  },
              {y4});
}

TEST_CASE("finite differences: matmul") {
  RngStream rng(17);
  Tensor a = random_param(rng, {4, 3});
  Tensor b = random_param(rng, {3, 5});
  Tensor r = Tensor::uniform(rng, {4, 5}, -1.0, 1.0);
  check_grads([&](const std::vector<Tensor>& p) { return o::sum(o::mul(o::matmul(p[0], p[1]), r)); },
              {a, b});
}

TEST_CASE("finite differences: conv2d, im2col round trip") {
  RngStream rng(19);
  Tensor x = random_param(rng, {2, 2, 5, 5});
  Tensor w = random_param(rng, {3, 2, 3, 3});
  Tensor r = Tensor::uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::mul(o::conv2d(p[0], p[1], 1), r));
  },
              {x, w});
}

TEST_CASE("finite differences: maxpool2x2") {
  // values spaced out so the FD step cannot flip an argmax
  RngStream rng(23);
  std::vector<double> v(2 * 1 * 4 * 4);
  std::vector<int> order(v.size());
  for (size_t i = 0; i < v.size(); ++i) order[i] = static_cast<int>(i);
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);
  for (size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * order[i];
  Tensor x = param({2, 1, 4, 4}, std::move(v));
  Tensor r = Tensor::uniform(rng, {2, 1, 2, 2}, -1.0, 1.0);
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::mul(o::maxpool2x2(p[0]), r));
  },
              {x}, 1e-5, 1e-4);
}

TEST_CASE("finite differences: softmax cross-entropy and batch norm") {
  RngStream rng(29);
  Tensor logits = random_param(rng, {4, 5}, -2.0, 2.0);
  std::vector<int> labels{0, 3, 2, 4};
  check_grads([&](const std::vector<Tensor>& p) {
    return o::softmax_cross_entropy(p[0], labels);
  },
              {logits});

  Tensor x = random_param(rng, {6, 3});
  Tensor gamma = random_param(rng, {3}, 0.5, 1.5);
  Tensor beta = random_param(rng, {3});
  Tensor r = Tensor::uniform(rng, {6, 3}, -1.0, 1.0);
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::mul(o::batch_norm(p[0], p[1], p[2]), r));
  },
              {x, gamma, beta}, 2e-5);

  Tensor x4 = random_param(rng, {2, 3, 4, 4});
  Tensor r4 = Tensor::uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
  check_grads([&](const std::vector<Tensor>& p) {
    return o::sum(o::mul(o::batch_norm(p[0], p[1], p[2]), r4));
  },
              {x4, gamma, beta}, 2e-5);
}

TEST_CASE("second order: FD of the analytic gradient") {
  RngStream rng(31);
  Tensor x = random_param(rng, {4});
  Tensor v = Tensor::uniform(rng, {4}, -1.0, 1.0);
  // s(x) = <grad f(x), v> with f = sum(sigmoid(x)^2); FD-check grad s
  auto s_fn = [&](const std::vector<Tensor>& ps) {
    Tensor f = o::sum(o::square(o::sigmoid(ps[0])));
    Tensor g = grad(f, std::vector<Tensor>{ps[0]}, true)[0];
    return o::sum(o::mul(g, v));
  };
  Tensor s = s_fn({x});
  auto hess_v = grad(s, std::vector<Tensor>{x});
  auto fd = oracles::fd_gradient(
      [&](const std::vector<Tensor>& ps) { return s_fn(ps).item(); }, {x}, 1e-5);
  CHECK(oracles::max_rel_err(hess_v[0], fd[0]) <= 1e-4);
}

TEST_CASE("second order through matmul chain") {
  RngStream rng(37);
  Tensor w = random_param(rng, {3, 2});
  Tensor xin = Tensor::uniform(rng, {5, 3}, -1.0, 1.0);
  Tensor v = Tensor::uniform(rng, {3, 2}, -1.0, 1.0);
  auto s_fn = [&](const std::vector<Tensor>& ps) {
    Tensor f = o::mean(o::square(o::sigmoid(o::matmul(xin, ps[0]))));
    Tensor g = grad(f, std::vector<Tensor>{ps[0]}, true)[0];
    return o::sum(o::mul(g, v));
  };
  Tensor s = s_fn({w});
  auto hv = grad(s, std::vector<Tensor>{w});
  auto fd = oracles::fd_gradient(
      [&](const std::vector<Tensor>& ps) { return s_fn(ps).item(); }, {w}, 1e-5);
  CHECK(oracles::max_rel_err(hv[0], fd[0]) <= 1e-4);
}

TEST_CASE("linearity of grad") {
  RngStream rng(41);
  Tensor x = random_param(rng, {6});
  const double a = 1.7, b = -0.6;
  Tensor f = o::sum(o::square(x));
  Tensor g = o::sum(o::exp(x));
  Tensor combo = o::add(o::mul_scalar(f, a), o::mul_scalar(g, b));
  auto gc = grad(combo, std::vector<Tensor>{x});
  auto gf = grad(f, std::vector<Tensor>{x});
  auto gg = grad(g, std::vector<Tensor>{x});
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(std::fabs(gc[0].at(i) - (a * gf[0].at(i) + b * gg[0].at(i))) <= 1e-12);
}

TEST_CASE("determinism: identical seeds give bit-identical tapes and gradients") {
  auto run = [] {
    RngStream rng(1234);
    Tensor x = Tensor::uniform(rng, {4, 4}, -1.0, 1.0);
    x.set_requires_grad(true);
    Tensor w = Tensor::normal(rng, {4, 2});
    w.set_requires_grad(true);
    Tensor loss = o::mean(o::square(o::sigmoid(o::matmul(x, w))));
    auto gs = grad(loss, std::vector<Tensor>{x, w});
    return std::tuple{graph_signature(loss), gs[0], gs[1]};
  };
  auto [sig1, gx1, gw1] = run();
  auto [sig2, gx2, gw2] = run();
  CHECK(sig1 == sig2);
  CHECK(std::memcmp(gx1.data().data(), gx2.data().data(), sizeof(double) * gx1.size()) == 0);
  CHECK(std::memcmp(gw1.data().data(), gw2.data().data(), sizeof(double) * gw1.size()) == 0);
}

TEST_CASE("errors: non-scalar output, detached wrt, shape mismatch") {
  Tensor x = param({2}, {1.0, 2.0});
  Tensor y = o::square(x);
  CHECK_THROWS_AS(grad(y, std::vector<Tensor>{x}), ValueError);

  Tensor z = param({2}, {1.0, 2.0});
  Tensor loss = o::sum(o::square(x));
  CHECK_THROWS_AS(grad(loss, std::vector<Tensor>{z}), ValueError);  // not on tape

  Tensor bad = param({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_WITH_AS(static_cast<void>(o::add(x, bad)),
                       doctest::Contains("add"), ShapeError);
  CHECK_THROWS_AS(static_cast<void>(o::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}))),
                  ShapeError);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = param({2}, {1.0, 2.0});
  NoGradGuard ng;
  Tensor y = o::sum(o::square(x));
  CHECK_FALSE(y.requires_grad());
  CHECK(trace(y).order.size() == 1);
}

TEST_SUITE_END();
