#include "stdit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stdit/autograd.hpp"
#include "stdit/kernels.hpp"

namespace stdit {

namespace {

using detail::Buffer;
using detail::make_op;

// Uninitialized; every caller writes all n elements.
template <class T>
std::shared_ptr<Buffer> alloc(std::size_t n) {
  return std::make_shared<Buffer>(dtype_of<T>(), n, false);
}

template <class T>
std::shared_ptr<Buffer> alloc_zeroed(std::size_t n) {
  return std::make_shared<Buffer>(dtype_of<T>(), n, true);
}

template <class T>
T* raw(Buffer& b) {
  return std::get<detail::Storage<T>>(b.values).data();
}

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " + to_string(b.dtype()));
  }
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Strides of `in` viewed as broadcast to `out` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  const auto cs = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) st[offset + i] = in[i] == 1 ? 0 : cs[i];
  return st;
}

// Calls fn(out_index, offset_a, offset_b) over every element of `out`,
// walking the last axis in an inner loop.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  if (out.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t r = out.size();
  const std::size_t inner = out[r - 1];
  const std::size_t ia = sa[r - 1];
  const std::size_t ib = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(base + j, oa + j * ia, ob + j * ib);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * out[ax];
      ob -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <class T>
std::span<const T> values(const Tensor& t) {
  return t.data<T>();
}

// ---- elementwise ----------------------------------------------------------

// `f(x)` forward, `d(x, y)` local derivative.
template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F f, D d) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto in = values<T>(x);
    auto buf = alloc<T>(in.size());
    T* out = raw<T>(*buf);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<T>(f(in[i]));
    return make_op(name, x.shape(), std::move(buf), {x}, [x, d](const Tensor& g, const Tensor& y) {
      return dispatch(g.dtype(), [&](auto tag2) -> std::vector<Tensor> {
        using U = decltype(tag2);
        const auto gv = values<U>(g);
        const auto xv = values<U>(x);
        const auto yv = values<U>(y);
        auto gb = alloc<U>(gv.size());
        U* go = raw<U>(*gb);
        for (std::size_t i = 0; i < gv.size(); ++i) go[i] = gv[i] * static_cast<U>(d(xv[i], yv[i]));
        return {make_op("grad", x.shape(), std::move(gb), {}, nullptr)};
      });
    });
  });
}

enum class BinaryKind { add, sub, mul, div };

template <BinaryKind K, class T>
inline T apply_binary(T a, T b) {
  if constexpr (K == BinaryKind::add) return a + b;
  if constexpr (K == BinaryKind::sub) return a - b;
  if constexpr (K == BinaryKind::mul) return a * b;
  if constexpr (K == BinaryKind::div) return a / b;
}

template <BinaryKind K>
Tensor binary_forward(const char* name, const Tensor& a, const Tensor& b, detail::BackwardFn backward) {
  require_same_dtype(name, a, b);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto av = values<T>(a);
    const auto bv = values<T>(b);
    auto buf = alloc<T>(numel(out_shape));
    T* out = raw<T>(*buf);
    const std::size_t n = numel(out_shape);
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary<K>(av[i], bv[i]);
    } else if (bv.size() == 1) {
      const T s = bv[0];
      for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary<K>(av[i], s);
    } else if (a.shape() == out_shape && n % bv.size() == 0 &&
               std::equal(b.shape().rbegin(), b.shape().rend(), out_shape.rbegin())) {
      // b matches a trailing block of a: row broadcast.
      const std::size_t inner = bv.size();
      for (std::size_t base = 0; base < n; base += inner)
        for (std::size_t j = 0; j < inner; ++j) out[base + j] = apply_binary<K>(av[base + j], bv[j]);
    } else {
      const auto sa = broadcast_strides(a.shape(), out_shape);
      const auto sb = broadcast_strides(b.shape(), out_shape);
      for_each_broadcast(out_shape, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = apply_binary<K>(av[ia], bv[ib]); });
    }
    return make_op(name, out_shape, std::move(buf), {a, b}, std::move(backward));
  });
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return binary_forward<BinaryKind::add>("add", a, b, [sa, sb](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
    return {sum_to(g, sa), sum_to(g, sb)};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return binary_forward<BinaryKind::sub>("sub", a, b, [sa, sb](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
    return {sum_to(g, sa), sum_to(neg(g), sb)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_forward<BinaryKind::mul>("mul", a, b, [a, b](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
    Tensor ga = a.requires_grad() ? sum_to(mul(g, b), a.shape()) : Tensor{};
    Tensor gb = b.requires_grad() ? sum_to(mul(g, a), b.shape()) : Tensor{};
    return {ga, gb};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_forward<BinaryKind::div>("div", a, b, [a, b](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
    Tensor ga = a.requires_grad() ? sum_to(div(g, b), a.shape()) : Tensor{};
    Tensor gb = b.requires_grad() ? sum_to(neg(div(mul(g, y), b)), b.shape()) : Tensor{};
    return {ga, gb};
  });
}

Tensor neg(const Tensor& x) {
  return unary_op("neg", x, [](auto v) { return -v; }, [](auto, auto) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      "scale", x, [factor](auto v) { return v * static_cast<decltype(v)>(factor); },
      [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](auto v) { return v + static_cast<decltype(v)>(value); }, [](auto, auto) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op("log", x, [](auto v) { return std::log(v); }, [](auto v, auto) { return 1 / v; });
}

Tensor expm1(const Tensor& x) {
  return unary_op("expm1", x, [](auto v) { return std::expm1(v); }, [](auto, auto y) { return y + 1; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op("sqrt", x, [](auto v) { return std::sqrt(v); }, [](auto, auto y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op("square", x, [](auto v) { return v * v; }, [](auto v, auto) { return 2 * v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op("tanh", x, [](auto v) { return std::tanh(v); }, [](auto, auto y) { return 1 - y * y; });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      "silu", x, [](auto v) { return v / (1 + std::exp(-v)); },
      [](auto v, auto) {
        const auto s = 1 / (1 + std::exp(-v));
        return s * (1 + v * (1 - s));
      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  // 0.5 (1 + tanh(u)) == sigmoid(2u)
  return unary_op(
      "gelu", x,
      [](auto v) {
        using T = decltype(v);
        const T u = T(kGeluC) * (v + T(kGeluK) * v * v * v);
        return v / (T(1) + std::exp(T(-2) * u));
      },
      [](auto v, auto) {
        using T = decltype(v);
        const T u = T(kGeluC) * (v + T(kGeluK) * v * v * v);
        const T s = T(1) / (T(1) + std::exp(T(-2) * u));
        return s + T(2) * v * s * (T(1) - s) * T(kGeluC) * (T(1) + T(3 * kGeluK) * v * v);
      });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const Shape shape = x.shape();
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc<T>(1);
    double acc = 0.0;
    for (T e : v) acc += e;
    raw<T>(*buf)[0] = static_cast<T>(acc);
    return make_op("sum", {}, std::move(buf), {x}, [shape](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
      return {broadcast_to(g, shape)};
    });
  });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const Shape in_shape = x.shape();
  const std::size_t ax = normalize_axis(axis, in_shape.size(), "sum");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in_shape[i];
  for (std::size_t i = ax + 1; i < in_shape.size(); ++i) inner *= in_shape[i];
  const std::size_t len = in_shape[ax];
  Shape kept = in_shape;
  kept[ax] = 1;
  Shape out_shape = kept;
  if (!keepdim) out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc_zeroed<T>(outer * inner);
    T* out = raw<T>(*buf);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * len + l) * inner + i];
    return make_op("sum_axis", out_shape, std::move(buf), {x},
                   [kept, in_shape](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
                     return {broadcast_to(reshape(g, kept), in_shape)};
                   });
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(std::max<std::size_t>(1, x.numel()))); }

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t len = x.dim(axis);
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(std::max<std::size_t>(1, len)));
}

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  if (shape == x.shape()) return x;
  return detail::make_view("reshape", x, std::move(shape));
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw ShapeError("permute: axes do not match rank of " + to_string(in));
  std::vector<bool> seen(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size() || seen[a]) throw ShapeError("permute: invalid axis list for " + to_string(in));
    seen[a] = true;
  }
  bool identity = true;
  for (std::size_t i = 0; i < axes.size(); ++i) identity = identity && axes[i] == i;
  if (identity) return x;
  Shape out(in.size());
  const auto in_strides = contiguous_strides(in);
  std::vector<std::size_t> src(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out[i] = in[axes[i]];
    src[i] = in_strides[axes[i]];
  }
  std::vector<std::size_t> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc<T>(v.size());
    T* o = raw<T>(*buf);
    const std::vector<std::size_t> zero(out.size(), 0);
    for_each_broadcast(out, src, zero, [&](std::size_t i, std::size_t is, std::size_t) { o[i] = v[is]; });
    return make_op("permute", out, std::move(buf), {x}, [inverse](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
      return {permute(g, inverse)};
    });
  });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[normalize_axis(axis0, x.rank(), "transpose")], axes[normalize_axis(axis1, x.rank(), "transpose")]);
  return permute(x, axes);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const Shape in_shape = x.shape();
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc<T>(numel(shape));
    T* o = raw<T>(*buf);
    const auto sx = broadcast_strides(in_shape, shape);
    const std::vector<std::size_t> zero(shape.size(), 0);
    for_each_broadcast(shape, sx, zero, [&](std::size_t i, std::size_t is, std::size_t) { o[i] = v[is]; });
    return make_op("broadcast_to", shape, std::move(buf), {x},
                   [in_shape](const Tensor& g, const Tensor&) -> std::vector<Tensor> { return {sum_to(g, in_shape)}; });
  });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shapes(shape, x.shape()) != x.shape()) {
    throw ShapeError("sum_to: cannot reduce " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const Shape in_shape = x.shape();
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc_zeroed<T>(numel(shape));
    T* o = raw<T>(*buf);
    const std::size_t n = numel(shape);
    if (v.size() % std::max<std::size_t>(1, n) == 0 && std::equal(shape.rbegin(), shape.rend(), in_shape.rbegin()) &&
        n > 0) {
      for (std::size_t base = 0; base < v.size(); base += n)
        for (std::size_t j = 0; j < n; ++j) o[j] += v[base + j];
    } else {
      const auto so = broadcast_strides(shape, in_shape);
      const std::vector<std::size_t> zero(in_shape.size(), 0);
      for_each_broadcast(in_shape, so, zero, [&](std::size_t i, std::size_t io, std::size_t) { o[io] += v[i]; });
    }
    return make_op("sum_to", shape, std::move(buf), {x},
                   [in_shape](const Tensor& g, const Tensor&) -> std::vector<Tensor> { return {broadcast_to(g, in_shape)}; });
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out = first;
  out[ax] = 0;
  for (const auto& p : parts) {
    require_same_dtype("concat", parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
    out[ax] += s[ax];
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out[i];
  for (std::size_t i = ax + 1; i < out.size(); ++i) inner *= out[i];
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[ax]);
  return dispatch(parts[0].dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto buf = alloc<T>(numel(out));
    T* o = raw<T>(*buf);
    const std::size_t row = out[ax] * inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto v = values<T>(p);
      const std::size_t block = p.shape()[ax] * inner;
      for (std::size_t r = 0; r < outer; ++r) std::copy_n(v.data() + r * block, block, o + r * row + offset);
      offset += block;
    }
    return make_op("concat", out, std::move(buf), parts,
                   [extents, ax](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
                     std::vector<Tensor> grads;
                     std::size_t begin = 0;
                     for (auto e : extents) {
                       grads.push_back(slice(g, static_cast<int>(ax), begin, begin + e));
                       begin += e;
                     }
                     return grads;
                   });
  });
}

namespace {

// Writes `g` into zeros of `shape` at [begin, begin + g.dim(ax)) along `ax`.
Tensor pad_slice(const Tensor& g, const Shape& shape, std::size_t ax, std::size_t begin) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
  for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = g.shape()[ax];
  return dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(g);
    auto buf = alloc_zeroed<T>(numel(shape));
    T* o = raw<T>(*buf);
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(v.data() + r * len * inner, len * inner, o + (r * shape[ax] + begin) * inner);
    return make_op("pad_slice", shape, std::move(buf), {}, nullptr);
  });
}

}  // namespace

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const Shape in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "slice");
  if (begin > end || end > in[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                     std::to_string(ax) + " of " + to_string(in));
  }
  if (begin == 0 && end == in[ax]) return x;
  Shape out = in;
  out[ax] = end - begin;
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto v = values<T>(x);
    auto buf = alloc<T>(numel(out));
    T* o = raw<T>(*buf);
    const std::size_t block = (end - begin) * inner;
    for (std::size_t r = 0; r < outer; ++r) std::copy_n(v.data() + (r * in[ax] + begin) * inner, block, o + r * block);
    return make_op("slice", out, std::move(buf), {x}, [in, ax, begin](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
      return {pad_slice(g, in, ax, begin)};
    });
  });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_same_dtype("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t m = trans_a ? sa[sa.size() - 1] : sa[sa.size() - 2];
  const std::size_t ka = trans_a ? sa[sa.size() - 2] : sa[sa.size() - 1];
  const std::size_t kb = trans_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const std::size_t n = trans_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (ka != kb) {
    throw ShapeError("matmul: inner extents differ: " + to_string(sa) + (trans_a ? "^T" : "") + " x " + to_string(sb) +
                     (trans_b ? "^T" : ""));
  }
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);

  // Batched input against a shared matrix folds into one large product.
  if (batch_b.empty() && !batch_a.empty() && !trans_a) {
    const std::size_t rows = numel(batch_a) * m;
    Shape out = batch_a;
    out.push_back(m);
    out.push_back(n);
    return reshape(matmul(reshape(a, {rows, ka}), b, false, trans_b), out);
  }
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) {
    throw ShapeError("matmul: batch extents differ: " + to_string(sa) + " x " + to_string(sb));
  }
  const Shape& batch = batch_a.empty() ? batch_b : batch_a;
  const std::size_t count = numel(batch);
  Shape out = batch;
  out.push_back(m);
  out.push_back(n);

  auto result = dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto buf = alloc<T>(numel(out));
    const T* pa = values<T>(a).data();
    const T* pb = values<T>(b).data();
    if (batch.empty()) {
      kernels::gemm<T>(trans_a, trans_b, m, n, ka, pa, pb, raw<T>(*buf));
    } else {
      kernels::gemm_batched<T>(count, trans_a, trans_b, m, n, ka, pa, batch_a.empty() ? 0 : m * ka, pb,
                               batch_b.empty() ? 0 : ka * n, raw<T>(*buf), m * n);
    }
    return buf;
  });
  return make_op("matmul", out, std::move(result), {a, b},
                 [a, b, trans_a, trans_b](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
                   Tensor ga;
                   Tensor gb;
                   if (a.requires_grad()) {
                     if (!trans_a) {
                       ga = trans_b ? matmul(g, b) : matmul(g, b, false, true);
                     } else {
                       ga = trans_b ? matmul(b, g, true, true) : matmul(b, g, false, true);
                     }
                     ga = sum_to(ga, a.shape());
                   }
                   if (b.requires_grad()) {
                     if (!trans_b) {
                       gb = trans_a ? matmul(a, g) : matmul(a, g, true, false);
                     } else {
                       gb = trans_a ? matmul(g, a, true, true) : matmul(g, a, true, false);
                     }
                     gb = sum_to(gb, b.shape());
                   }
                   return {ga, gb};
                 });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "softmax");
  if (ax != x.rank() - 1) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[ax], axes.back());
    return permute(softmax(permute(x, axes), -1), axes);
  }
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.numel() / cols;
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto buf = alloc<T>(x.numel());
    kernels::softmax_rows<T>(rows, cols, values<T>(x).data(), raw<T>(*buf));
    return make_op("softmax", x.shape(), std::move(buf), {x},
                   [rows, cols](const Tensor& g, const Tensor& y) -> std::vector<Tensor> {
                     return dispatch(g.dtype(), [&](auto tag2) -> std::vector<Tensor> {
                       using U = decltype(tag2);
                       const auto gv = values<U>(g);
                       const auto yv = values<U>(y);
                       auto gb = alloc<U>(gv.size());
                       U* o = raw<U>(*gb);
                       for (std::size_t r = 0; r < rows; ++r) {
                         U dot = 0;
                         for (std::size_t j = 0; j < cols; ++j) dot += gv[r * cols + j] * yv[r * cols + j];
                         for (std::size_t j = 0; j < cols; ++j)
                           o[r * cols + j] = yv[r * cols + j] * (gv[r * cols + j] - dot);
                       }
                       return {make_op("grad", g.shape(), std::move(gb), {}, nullptr)};
                     });
                   });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t cols = x.shape().empty() ? 1 : x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.numel() / cols;
  for (const Tensor* p : {&gamma, &beta}) {
    if (p->defined() && p->shape() != Shape{cols}) {
      throw ShapeError("layer_norm: affine parameter shape " + to_string(p->shape()) + " does not match last axis of " +
                       to_string(x.shape()));
    }
    if (p->defined()) require_same_dtype("layer_norm", x, *p);
  }
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xhat = alloc<T>(x.numel());
    auto rstd = alloc<T>(rows);
    std::vector<T> mu(rows);
    kernels::layer_norm_rows<T>(rows, cols, values<T>(x).data(), static_cast<T>(eps), raw<T>(*xhat), mu.data(),
                                raw<T>(*rstd));
    auto out = alloc<T>(x.numel());
    T* o = raw<T>(*out);
    const T* xh = raw<T>(*xhat);
    const T* gm = gamma.defined() ? values<T>(gamma).data() : nullptr;
    const T* bt = beta.defined() ? values<T>(beta).data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) {
        T v = xh[r * cols + j];
        if (gm) v *= gm[j];
        if (bt) v += bt[j];
        o[r * cols + j] = v;
      }
    }
    std::vector<Tensor> inputs{x};
    if (gamma.defined()) inputs.push_back(gamma);
    if (beta.defined()) inputs.push_back(beta);
    const bool has_gamma = gamma.defined();
    const bool has_beta = beta.defined();
    const Shape shape = x.shape();
    return make_op(
        "layer_norm", shape, std::move(out), inputs,
        [xhat, rstd, gamma, has_gamma, has_beta, rows, cols, shape](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
          using U = T;
          const auto gv = values<U>(g);
          const U* xh = raw<U>(*xhat);
          const U* rs = raw<U>(*rstd);
          const U* gm = has_gamma ? values<U>(gamma).data() : nullptr;
          auto dx = alloc<U>(rows * cols);
          auto dgamma = alloc_zeroed<U>(cols);
          auto dbeta = alloc_zeroed<U>(cols);
          U* dxo = raw<U>(*dx);
          U* dg = raw<U>(*dgamma);
          U* db = raw<U>(*dbeta);
          std::vector<U> gx(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            U mean_g = 0;
            U mean_gx = 0;
            for (std::size_t j = 0; j < cols; ++j) {
              const U gj = gv[r * cols + j];
              const U xj = xh[r * cols + j];
              dg[j] += gj * xj;
              db[j] += gj;
              gx[j] = gm ? gj * gm[j] : gj;
              mean_g += gx[j];
              mean_gx += gx[j] * xj;
            }
            mean_g /= static_cast<U>(cols);
            mean_gx /= static_cast<U>(cols);
            for (std::size_t j = 0; j < cols; ++j)
              dxo[r * cols + j] = rs[r] * (gx[j] - mean_g - xh[r * cols + j] * mean_gx);
          }
          std::vector<Tensor> grads{make_op("grad", shape, std::move(dx), {}, nullptr)};
          if (has_gamma) grads.push_back(make_op("grad", {cols}, std::move(dgamma), {}, nullptr));
          if (has_beta) grads.push_back(make_op("grad", {cols}, std::move(dbeta), {}, nullptr));
          return grads;
        });
  });
}

Tensor cast(const Tensor& x, DType dtype) {
  if (x.dtype() == dtype) return x;
  const DType from = x.dtype();
  auto buf = dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto b = alloc<T>(x.numel());
    T* o = raw<T>(*b);
    const auto v = x.to_vector();
    for (std::size_t i = 0; i < v.size(); ++i) o[i] = static_cast<T>(v[i]);
    return b;
  });
  return make_op("cast", x.shape(), std::move(buf), {x},
                 [from](const Tensor& g, const Tensor&) -> std::vector<Tensor> { return {cast(g, from)}; });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

}  // namespace stdit
