#pragma once

#include <vector>

#include "stdit/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops broadcast with
// numpy rules. Every op rejects non-finite results with NumericError.

namespace stdit {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor expm1(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor silu(const Tensor& x);
/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);

/// Sum of all elements as a scalar.
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
/// out.shape[i] = x.shape[axes[i]].
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums `x` down to `shape` over broadcast axes; the adjoint of broadcast_to.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Elements [begin, end) along `axis`.
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);

/// Matrix product over the last two axes. Leading axes are batch axes and
/// must match, except that either operand may be a plain matrix shared by
/// every batch entry. `trans_a` / `trans_b` transpose the last two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor softmax(const Tensor& x, int axis = -1);

/// Normalizes over the last axis. `gamma` and `beta` may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {}, double eps = 1e-5);

Tensor cast(const Tensor& x, DType dtype);
/// Gradient stops here; values pass through.
Tensor stop_gradient(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }

/// Broadcast shape of `a` and `b`; throws ShapeError naming both.
Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace stdit
