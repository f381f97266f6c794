#pragma once

#include "sparsemeta/tensor.hpp"

namespace sparsemeta {
namespace ops {

// Elementwise with numpy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor scalar_sub(double c, const Tensor& a);  // c - a

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);                    // 2-D
Tensor permute(const Tensor& a, std::vector<int> dims);  // rank <= 4
Tensor broadcast_to(const Tensor& a, Shape shape);
Tensor sum_to(const Tensor& a, Shape shape);  // reduction adjoint of broadcast_to
Tensor sum(const Tensor& a);                  // scalar
Tensor mean(const Tensor& a);                 // scalar

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)

// 3x3-style convolution machinery, stride 1. im2col lays out receptive fields
// as rows ((N*OH*OW) x (C*kh*kw)); col2im is its exact adjoint (scatter-add).
Tensor im2col(const Tensor& x, int kh, int kw, int pad);
Tensor col2im(const Tensor& cols, Shape img_shape, int kh, int kw, int pad);

// 2x2 max-pool, stride 2. Backward routes the gradient to the argmax location
// captured at forward time; the routing is treated as fixed (subgradient), so
// second derivatives through the pool are zero almost everywhere.
Tensor maxpool2x2(const Tensor& x);

// Mean softmax cross-entropy over rows of (B,C) logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// ---- composed ops (built from the primitives above; gradients of any order
// ---- follow from the primitive rules) ----

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);  // b optional (undefined)
Tensor conv2d(const Tensor& x, const Tensor& w, int pad);  // x (N,C,H,W), w (F,C,kh,kw)
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);  // (B,C) -> (B,1)

Tensor onehot(const std::vector<int>& labels, int classes);  // constant

}  // namespace ops

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return ops::div(a, b); }
inline Tensor operator-(const Tensor& a) { return ops::neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return ops::add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return ops::add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return ops::mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return ops::mul_scalar(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return ops::mul_scalar(a, 1.0 / c); }

}  // namespace sparsemeta
