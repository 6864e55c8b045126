#include "stdit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stdit/ops.hpp"

namespace stdit {

Tensor ParameterSet::add(std::string name, Tensor value) {
  for (const auto& [n, _] : entries_) {
    if (n == name) throw ContractError("duplicate parameter name: " + name);
  }
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), value);
  return value;
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

const Tensor* ParameterSet::find(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return &t;
  }
  return nullptr;
}

void ParameterSet::assign_from(const ParameterSet& other) {
  if (other.size() != size()) throw ContractError("assign_from: parameter count mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& [name, dst] = entries_[i];
    const auto& [oname, src] = other.entries_[i];
    if (name != oname || dst.shape() != src.shape()) {
      throw ContractError("assign_from: parameter '" + name + "' does not match '" + oname + "'");
    }
    dispatch(dst.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto out = dst.mutable_data<T>();
      const auto in = cast(src, dst.dtype()).template data<T>();
      std::copy(in.begin(), in.end(), out.begin());
    });
  }
}

ParameterSet ParameterSet::clone() const {
  ParameterSet copy;
  for (const auto& [name, t] : entries_) copy.add(name, t.clone());
  return copy;
}

void ParameterSet::randomize(Rng& rng, double std) {
  for (auto& [_, t] : entries_) {
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.normal() * std);
    });
  }
}

Tensor ParamFactory::make(const std::string& name, const Shape& shape, Init init) {
  Tensor t = Tensor::zeros(shape, dtype);
  if (init == Init::trunc_normal) {
    dispatch(dtype, [&](auto tag) {
      using T = decltype(tag);
      for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.truncated_normal(init_std));
    });
  }
  return params.add(name, t);
}

Tensor ParamFactory::constant(const std::string& name, const Shape& shape, double value) {
  return params.add(name, Tensor::full(shape, value, dtype));
}

Linear Linear::create(ParamFactory& f, const std::string& name, std::size_t in, std::size_t out, Init init,
                      bool with_bias) {
  Linear l;
  l.weight = f.make(name + ".weight", {in, out}, init);
  if (with_bias) l.bias = f.make(name + ".bias", {out}, Init::zeros);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

LayerNormParams LayerNormParams::create(ParamFactory& f, const std::string& name, std::size_t dim) {
  return {f.constant(name + ".gamma", {dim}, 1.0), f.constant(name + ".beta", {dim}, 0.0)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

Mlp Mlp::create(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t hidden, std::size_t out,
                Init out_init) {
  return {Linear::create(f, name + ".fc1", dim, hidden, Init::trunc_normal),
          Linear::create(f, name + ".fc2", hidden, out, out_init)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

void AttentionProbe::record(const Tensor& w) {
  shapes.push_back(w.shape());
  if (keep_weights) weights.push_back(w.detach());
}

AttentionWeights AttentionWeights::create(ParamFactory& f, const std::string& name, std::size_t dim,
                                          std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ContractError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionWeights w;
  w.q = Linear::create(f, name + ".q", dim, dim, Init::trunc_normal);
  w.k = Linear::create(f, name + ".k", dim, dim, Init::trunc_normal, false);
  w.v = Linear::create(f, name + ".v", dim, dim, Init::trunc_normal);
  w.o = Linear::create(f, name + ".o", dim, dim, Init::trunc_normal);
  w.heads = heads;
  return w;
}

AttentionWeights AttentionWeights::create_cross(ParamFactory& f, const std::string& name, std::size_t dim,
                                                std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ContractError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionWeights w;
  w.q = Linear::create(f, name + ".q", dim, dim, Init::trunc_normal);
  w.k = Linear::create(f, name + ".k", dim, dim, Init::trunc_normal, false);
  w.v = Linear::create(f, name + ".v", dim, dim, Init::trunc_normal, false);
  w.o = Linear::create(f, name + ".o", dim, dim, Init::zeros, false);
  w.heads = heads;
  return w;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] % heads != 0) {
    throw ShapeError("split_heads: expected [B, L, d] with d divisible by " + std::to_string(heads) + ", got " +
                     to_string(s));
  }
  if (heads == 1) return reshape(x, {s[0], 1, s[1], s[2]});
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("merge_heads: expected rank 4, got " + to_string(s));
  if (s[1] == 1) return reshape(x, {s[0], s[2], s[3]});
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionProbe* probe) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor weights = softmax(matmul(scale(q, inv_sqrt), k, false, true), -1);
  if (probe) probe->record(weights);
  return matmul(weights, v);
}

Tensor attend(const AttentionWeights& w, const Tensor& queries, const Tensor& context, AttentionProbe* probe) {
  if (queries.rank() != 3 || context.rank() != 3 || queries.dim(0) != context.dim(0)) {
    throw ShapeError("attend: expected [B, Lq, d] and [B, Lk, d], got " + to_string(queries.shape()) + " and " +
                     to_string(context.shape()));
  }
  Tensor q = split_heads(w.q(queries), w.heads);
  Tensor k = split_heads(w.k(context), w.heads);
  Tensor v = split_heads(w.v(context), w.heads);
  return w.o(merge_heads(scaled_dot_attention(q, k, v, probe)));
}

double param_grad_check(const std::function<Tensor()>& loss, ParameterSet& params, const FiniteDiffOptions& options) {
  const Tensor y = loss();
  if (y.numel() != 1) throw ContractError("param_grad_check: loss must be a scalar");
  const GradMap grads = backward(y);
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  double worst = 0.0;
  for (auto& [name, p] : params.entries()) {
    if (p.dtype() != DType::f64) throw ContractError("param_grad_check: parameter " + name + " is not f64");
    const auto analytic = grads.get(p).to_vector();
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords > 0 && options.max_coords < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }
    auto data = p.mutable_data<double>();
    double max_diff = 0.0, scale = 1e-8;
    for (std::size_t i : coords) {
      const double orig = data[i];
      data[i] = orig + options.eps;
      const double up = loss().item();
      data[i] = orig - options.eps;
      const double down = loss().item();
      data[i] = orig;
      const double fd = (up - down) / (2.0 * options.eps);
      max_diff = std::max(max_diff, std::abs(fd - analytic[i]));
      scale = std::max({scale, std::abs(fd), std::abs(analytic[i])});
    }
    worst = std::max(worst, max_diff / scale);
  }
  return worst;
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_vec) {
  return add(mul(x, add_scalar(scale_vec, 1.0)), shift);
}

}  // namespace stdit
