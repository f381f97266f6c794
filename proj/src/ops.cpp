#include "sparsemeta/ops.hpp"

#include <algorithm>
#include <cmath>

namespace sparsemeta {
namespace ops {

namespace {

constexpr int kMaxRank = 6;

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

struct Strides {
  int64_t s[kMaxRank] = {0};
};

// Strides of `sh` right-aligned against a rank-`out_rank` result, 0 on
// broadcast dimensions.
Strides aligned_strides(const Shape& sh, const Shape& out) {
  int r = static_cast<int>(out.size()), rs = static_cast<int>(sh.size());
  Strides st;
  int64_t acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    int od = i + (r - rs);
    st.s[od] = (sh[i] == 1 && out[od] != 1) ? 0 : acc;
    acc *= sh[i];
  }
  return st;
}

template <class F>
void bcast_binary(const Shape& os, const Shape& as, std::span<const double> a, const Shape& bs,
                  std::span<const double> b, std::vector<double>& out, F f) {
  int64_t n = static_cast<int64_t>(out.size());
  if (as == bs) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
    return;
  }
  if (b.size() == 1) {
    double bv = b[0];
    for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], bv);
    return;
  }
  if (a.size() == 1) {
    double av = a[0];
    for (int64_t i = 0; i < n; ++i) out[i] = f(av, b[i]);
    return;
  }
  int r = static_cast<int>(os.size());
  if (r > kMaxRank) throw ShapeError("broadcast: rank > 6 unsupported");
  Strides sa = aligned_strides(as, os), sb = aligned_strides(bs, os);
  int64_t idx[kMaxRank] = {0};
  int64_t ao = 0, bo = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = f(a[ao], b[bo]);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ao += sa.s[d];
      bo += sb.s[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      ao -= sa.s[d] * os[d];
      bo -= sb.s[d] * os[d];
    }
  }
}

using Back = std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&,
                                               const Tensor&)>;

template <class F>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, Back back) {
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<size_t>(numel(os)));
  bcast_binary(os, a.shape(), a.data(), b.shape(), b.data(), out, f);
  return make_op(name, std::move(os), std::move(out), {a, b}, std::move(back));
}

template <class F>
Tensor unary_op(const char* name, const Tensor& a, F f, Back back) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x = f(x);
  return make_op(name, a.shape(), std::move(out), {a}, std::move(back));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        std::vector<Tensor> r(2);
        if (in[0].requires_grad()) r[0] = sum_to(g, in[0].shape());
        if (in[1].requires_grad()) r[1] = sum_to(g, in[1].shape());
        return r;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        std::vector<Tensor> r(2);
        if (in[0].requires_grad()) r[0] = sum_to(g, in[0].shape());
        if (in[1].requires_grad()) r[1] = sum_to(neg(g), in[1].shape());
        return r;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        std::vector<Tensor> r(2);
        if (in[0].requires_grad()) r[0] = sum_to(mul(g, in[1]), in[0].shape());
        if (in[1].requires_grad()) r[1] = sum_to(mul(g, in[0]), in[1].shape());
        return r;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        std::vector<Tensor> r(2);
        if (in[0].requires_grad()) r[0] = sum_to(div(g, in[1]), in[0].shape());
        if (in[1].requires_grad())
          r[1] = sum_to(neg(mul(g, div(in[0], square(in[1])))), in[1].shape());
        return r;
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{neg(g)};
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{g};
      });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{mul_scalar(g, c)};
      });
}

Tensor scalar_sub(double c, const Tensor& a) {
  return unary_op(
      "scalar_sub", a, [c](double x) { return c - x; },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{neg(g)};
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        auto d = in[0].data();
        std::vector<double> m(d.size());
        for (size_t i = 0; i < d.size(); ++i) m[i] = d[i] > 0.0 ? 1.0 : 0.0;
        Tensor mask = Tensor::from(in[0].shape(), std::move(m));
        return std::vector<Tensor>{mul(g, mask)};
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g) {
        return std::vector<Tensor>{mul(mul(g, out), scalar_sub(1.0, out))};
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{div(g, in[0])};
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g) {
        return std::vector<Tensor>{mul(g, out)};
      });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g) {
        return std::vector<Tensor>{mul_scalar(div(g, out), 0.5)};
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{mul(mul_scalar(g, 2.0), in[0])};
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      "clamp", a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
        auto d = in[0].data();
        std::vector<double> m(d.size());
        for (size_t i = 0; i < d.size(); ++i) m[i] = (d[i] >= lo && d[i] <= hi) ? 1.0 : 0.0;
        Tensor mask = Tensor::from(in[0].shape(), std::move(m));
        return std::vector<Tensor>{mul(g, mask)};
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {a},
                 [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{reshape(g, in[0].shape())};
                 });
}

Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
  int m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(m) * n);
  auto d = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = d[static_cast<size_t>(i) * n + j];
  return make_op("transpose", {n, m}, std::move(out), {a},
                 [](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

Tensor permute(const Tensor& a, std::vector<int> dims) {
  int r = a.dim();
  if (static_cast<int>(dims.size()) != r || r > 4)
    throw ShapeError("permute: bad dims for rank " + std::to_string(r));
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = a.shape()[dims[i]];
  // input strides, then walk output index space
  int64_t istr[4] = {0, 0, 0, 0};
  int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    istr[i] = acc;
    acc *= a.shape()[i];
  }
  std::vector<double> out(static_cast<size_t>(a.size()));
  auto d = a.data();
  int64_t idx[4] = {0, 0, 0, 0};
  int64_t off = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    out[i] = d[off];
    for (int k = r - 1; k >= 0; --k) {
      ++idx[k];
      off += istr[dims[k]];
      if (idx[k] < os[k]) break;
      idx[k] = 0;
      off -= istr[dims[k]] * os[k];
    }
  }
  std::vector<int> inv(r);
  for (int i = 0; i < r; ++i) inv[dims[i]] = i;
  return make_op("permute", std::move(os), std::move(out), {a},
                 [inv](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{permute(g, inv)};
                 });
}

Tensor broadcast_to(const Tensor& a, Shape shape) {
  if (a.shape() == shape) return a;
  Shape check = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (check != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  int r = static_cast<int>(shape.size());
  Strides sa = aligned_strides(a.shape(), shape);
  std::vector<double> out(static_cast<size_t>(numel(shape)));
  auto d = a.data();
  int64_t idx[kMaxRank] = {0};
  int64_t ao = 0;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = d[ao];
    for (int k = r - 1; k >= 0; --k) {
      ++idx[k];
      ao += sa.s[k];
      if (idx[k] < shape[k]) break;
      idx[k] = 0;
      ao -= sa.s[k] * shape[k];
    }
  }
  return make_op("broadcast_to", std::move(shape), std::move(out), {a},
                 [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{sum_to(g, in[0].shape())};
                 });
}

Tensor sum_to(const Tensor& a, Shape shape) {
  if (a.shape() == shape) return a;
  Shape check = broadcast_shape(shape, a.shape(), "sum_to");
  if (check != a.shape())
    throw ShapeError("sum_to: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  int r = a.dim();
  Strides so = aligned_strides(shape, a.shape());
  std::vector<double> out(static_cast<size_t>(numel(shape)), 0.0);
  auto d = a.data();
  const Shape& as = a.shape();
  int64_t idx[kMaxRank] = {0};
  int64_t oo = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    out[oo] += d[i];
    for (int k = r - 1; k >= 0; --k) {
      ++idx[k];
      oo += so.s[k];
      if (idx[k] < as[k]) break;
      idx[k] = 0;
      oo -= so.s[k] * as[k];
    }
  }
  return make_op("sum_to", std::move(shape), std::move(out), {a},
                 [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op("sum", {1}, {s}, {a},
                 [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
                 });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  double n = static_cast<double>(a.size());
  return make_op("mean", {1}, {s / n}, {a},
                 [n](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{broadcast_to(mul_scalar(g, 1.0 / n), in[0].shape())};
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (int i = 0; i < m; ++i) {
    double* Ci = out.data() + static_cast<size_t>(i) * n;
    const double* Ai = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      double av = Ai[p];
      const double* Bp = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) Ci[j] += av * Bp[j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   std::vector<Tensor> r(2);
                   if (in[0].requires_grad()) r[0] = matmul(g, transpose(in[1]));
                   if (in[1].requires_grad()) r[1] = matmul(transpose(in[0]), g);
                   return r;
                 });
}

Tensor im2col(const Tensor& x, int kh, int kw, int pad) {
  if (x.dim() != 4) throw ShapeError("im2col: expected (N,C,H,W), got " + shape_str(x.shape()));
  int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("im2col: kernel larger than padded input");
  std::vector<double> out(static_cast<size_t>(N) * oh * ow * C * kh * kw, 0.0);
  auto d = x.data();
  int cols = C * kh * kw;
  for (int n = 0; n < N; ++n)
    for (int r = 0; r < oh; ++r)
      for (int c2 = 0; c2 < ow; ++c2) {
        size_t row = (static_cast<size_t>(n) * oh + r) * ow + c2;
        double* orow = out.data() + row * cols;
        for (int ch = 0; ch < C; ++ch)
          for (int i = 0; i < kh; ++i) {
            int hy = r + i - pad;
            if (hy < 0 || hy >= H) continue;
            const double* src = d.data() + ((static_cast<size_t>(n) * C + ch) * H + hy) * W;
            double* dst = orow + (ch * kh + i) * kw;
            for (int j = 0; j < kw; ++j) {
              int wx = c2 + j - pad;
              if (wx >= 0 && wx < W) dst[j] = src[wx];
            }
          }
      }
  Shape xs = x.shape();
  return make_op("im2col", {N * oh * ow, cols}, std::move(out), {x},
                 [xs, kh, kw, pad](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{col2im(g, xs, kh, kw, pad)};
                 });
}

Tensor col2im(const Tensor& cols, Shape img_shape, int kh, int kw, int pad) {
  if (cols.dim() != 2 || img_shape.size() != 4)
    throw ShapeError("col2im: bad arguments " + shape_str(cols.shape()));
  int N = img_shape[0], C = img_shape[1], H = img_shape[2], W = img_shape[3];
  int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
  int ncols = C * kh * kw;
  if (cols.shape()[0] != N * oh * ow || cols.shape()[1] != ncols)
    throw ShapeError("col2im: cols " + shape_str(cols.shape()) + " inconsistent with image " +
                     shape_str(img_shape));
  std::vector<double> out(static_cast<size_t>(numel(img_shape)), 0.0);
  auto d = cols.data();
  for (int n = 0; n < N; ++n)
    for (int r = 0; r < oh; ++r)
      for (int c2 = 0; c2 < ow; ++c2) {
        size_t row = (static_cast<size_t>(n) * oh + r) * ow + c2;
        const double* srow = d.data() + row * ncols;
        for (int ch = 0; ch < C; ++ch)
          for (int i = 0; i < kh; ++i) {
            int hy = r + i - pad;
            if (hy < 0 || hy >= H) continue;
            double* dst = out.data() + ((static_cast<size_t>(n) * C + ch) * H + hy) * W;
            const double* src = srow + (ch * kh + i) * kw;
            for (int j = 0; j < kw; ++j) {
              int wx = c2 + j - pad;
              if (wx >= 0 && wx < W) dst[wx] += src[j];
            }
          }
      }
  return make_op("col2im", std::move(img_shape), std::move(out), {cols},
                 [kh, kw, pad](const std::vector<Tensor>&, const Tensor& out_t, const Tensor& g) {
                   return std::vector<Tensor>{im2col(g, kh, kw, pad)};
                   (void)out_t;
                 });
}

namespace {

// Gradient routing for max-pool: scatter into the argmax slots / gather back.
// Both are linear maps given the routing, and they are each other's adjoint.
Tensor pool_scatter(const Tensor& g, std::shared_ptr<std::vector<int64_t>> idx, Shape in_shape);

Tensor pool_gather(const Tensor& x, std::shared_ptr<std::vector<int64_t>> idx, Shape out_shape) {
  std::vector<double> out(idx->size());
  auto d = x.data();
  for (size_t i = 0; i < idx->size(); ++i) out[i] = d[(*idx)[i]];
  Shape in_shape = x.shape();
  return make_op("pool_gather", std::move(out_shape), std::move(out), {x},
                 [idx, in_shape](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{pool_scatter(g, idx, in_shape)};
                 });
}

Tensor pool_scatter(const Tensor& g, std::shared_ptr<std::vector<int64_t>> idx, Shape in_shape) {
  std::vector<double> out(static_cast<size_t>(numel(in_shape)), 0.0);
  auto d = g.data();
  for (size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += d[i];
  Shape g_shape = g.shape();
  return make_op("pool_scatter", std::move(in_shape), std::move(out), {g},
                 [idx, g_shape](const std::vector<Tensor>&, const Tensor&, const Tensor& gg) {
                   return std::vector<Tensor>{pool_gather(gg, idx, g_shape)};
                 });
}

}  // namespace

Tensor maxpool2x2(const Tensor& x) {
  if (x.dim() != 4) throw ShapeError("maxpool2x2: expected (N,C,H,W), got " + shape_str(x.shape()));
  int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2x2: spatial extent must be even, got " + shape_str(x.shape()));
  int oh = H / 2, ow = W / 2;
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N) * C * oh * ow);
  std::vector<double> out(idx->size());
  auto d = x.data();
  size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          int64_t base = ((static_cast<int64_t>(n) * C + c) * H + 2 * r) * W + 2 * q;
          int64_t best = base;
          double bv = d[base];
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              int64_t p = base + di * W + dj;
              if (d[p] > bv) {
                bv = d[p];
                best = p;
              }
            }
          out[o] = bv;
          (*idx)[o++] = best;
        }
  Shape in_shape = x.shape();
  return make_op("maxpool2x2", {N, C, oh, ow}, std::move(out), {x},
                 [idx, in_shape](const std::vector<Tensor>&, const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{pool_scatter(g, idx, in_shape)};
                 });
}

Tensor onehot(const std::vector<int>& labels, int classes) {
  std::vector<double> out(labels.size() * static_cast<size_t>(classes), 0.0);
  for (size_t i = 0; i < labels.size(); ++i) out[i * classes + labels[i]] = 1.0;
  return Tensor::from({static_cast<int>(labels.size()), classes}, std::move(out));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2) throw ShapeError("softmax_cross_entropy: logits must be (B,C)");
  int B = logits.shape()[0], C = logits.shape()[1];
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B) + " rows");
  for (int l : labels)
    if (l < 0 || l >= C) throw ValueError("softmax_cross_entropy: label out of range");
  auto d = logits.data();
  double loss = 0.0;
  for (int i = 0; i < B; ++i) {
    const double* row = d.data() + static_cast<size_t>(i) * C;
    double m = row[0];
    for (int j = 1; j < C; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < C; ++j) s += std::exp(row[j] - m);
    loss += m + std::log(s) - row[labels[i]];
  }
  auto lab = std::make_shared<std::vector<int>>(labels);
  return make_op("softmax_cross_entropy", {1}, {loss / B}, {logits},
                 [lab, B, C](const std::vector<Tensor>& in, const Tensor&, const Tensor& g) {
                   Tensor p = softmax_rows(in[0]);
                   Tensor delta = sub(p, onehot(*lab, C));
                   Tensor scale = broadcast_to(mul_scalar(g, 1.0 / B), {B, C});
                   return std::vector<Tensor>{mul(delta, scale)};
                 });
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, reshape(b, {1, w.shape()[1]}));
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int pad) {
  if (w.dim() != 4) throw ShapeError("conv2d: weights must be (F,C,kh,kw)");
  if (x.dim() != 4) throw ShapeError("conv2d: input must be (N,C,H,W)");
  int F = w.shape()[0], C = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (x.shape()[1] != C)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  int N = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
  int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
  Tensor cols = im2col(x, kh, kw, pad);               // (N*oh*ow, C*kh*kw)
  Tensor wmat = transpose(reshape(w, {F, C * kh * kw}));
  Tensor y = matmul(cols, wmat);                      // (N*oh*ow, F)
  return permute(reshape(y, {N, oh, ow, F}), {0, 3, 1, 2});
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  Shape red;
  if (x.dim() == 2)
    red = {1, x.shape()[1]};
  else if (x.dim() == 4)
    red = {1, x.shape()[1], 1, 1};
  else
    throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  double cnt = static_cast<double>(x.size()) / static_cast<double>(numel(red));
  Tensor m = mul_scalar(sum_to(x, red), 1.0 / cnt);
  Tensor xc = sub(x, broadcast_to(m, x.shape()));
  Tensor v = mul_scalar(sum_to(square(xc), red), 1.0 / cnt);
  Tensor y = div(xc, broadcast_to(sqrt(add_scalar(v, eps)), x.shape()));
  return add(mul(y, broadcast_to(reshape(gamma, red), x.shape())),
             broadcast_to(reshape(beta, red), x.shape()));
}

namespace {
Tensor rowmax_const(const Tensor& a) {
  int B = a.shape()[0], C = a.shape()[1];
  std::vector<double> m(B);
  auto d = a.data();
  for (int i = 0; i < B; ++i) {
    const double* row = d.data() + static_cast<size_t>(i) * C;
    double mx = row[0];
    for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    m[i] = mx;
  }
  return Tensor::from({B, 1}, std::move(m));
}
}  // namespace

Tensor logsumexp_rows(const Tensor& a) {
  if (a.dim() != 2) throw ShapeError("logsumexp_rows: expected (B,C)");
  // The detached row max keeps exp() in range; the identity is exact for any
  // constant shift, so gradients of all orders are unaffected.
  Tensor m = rowmax_const(a);
  Tensor e = exp(sub(a, broadcast_to(m, a.shape())));
  return add(log(sum_to(e, {a.shape()[0], 1})), m);
}

Tensor softmax_rows(const Tensor& a) {
  if (a.dim() != 2) throw ShapeError("softmax_rows: expected (B,C)");
  Tensor lse = logsumexp_rows(a);
  return exp(sub(a, broadcast_to(lse, a.shape())));
}

}  // namespace ops
}  // namespace sparsemeta
