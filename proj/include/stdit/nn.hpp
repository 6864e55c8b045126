#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stdit/autograd.hpp"
#include "stdit/random.hpp"
#include "stdit/tensor.hpp"

namespace stdit {

/// Ordered, named collection of trainable leaves.
class ParameterSet {
 public:
  /// Registers `value` as a gradient-tracked leaf and returns the handle.
  Tensor add(std::string name, Tensor value);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total scalar count across all parameters.
  std::size_t element_count() const;
  const Tensor* find(std::string_view name) const;

  /// Copies values from `other` into this set's storage; names and shapes
  /// must match one to one.
  void assign_from(const ParameterSet& other);
  /// Independent deep copy (fresh leaves, same names).
  ParameterSet clone() const;
  /// Overwrites every value with N(0, std). Tests use this to get rid of
  /// zero-initialized gates.
  void randomize(Rng& rng, double std);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

enum class Init { trunc_normal, zeros };

/// Parameter construction context for one model.
struct ParamFactory {
  ParameterSet& params;
  Rng& rng;
  DType dtype;
  double init_std = 0.02;

  Tensor make(const std::string& name, const Shape& shape, Init init);
  Tensor constant(const std::string& name, const Shape& shape, double value);
};

/// y = x W (+ b), W stored as [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when bias-free

  static Linear create(ParamFactory& f, const std::string& name, std::size_t in, std::size_t out, Init init,
                       bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  static LayerNormParams create(ParamFactory& f, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const;
};

/// Two-layer GELU MLP.
struct Mlp {
  Linear fc1;
  Linear fc2;
  static Mlp create(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t hidden,
                    std::size_t out, Init out_init = Init::trunc_normal);
  Tensor operator()(const Tensor& x) const;
};

/// Records attention-weight tensors seen during a forward pass.
struct AttentionProbe {
  std::vector<Shape> shapes;
  std::vector<Tensor> weights;  // detached; only filled when keep_weights
  bool keep_weights = false;

  void record(const Tensor& w);
};

/// Multi-head attention projections.
struct AttentionWeights {
  Linear q;
  Linear k;
  Linear v;
  Linear o;
  std::size_t heads = 1;

  /// Self-attention layout. Keys carry no bias: softmax ignores a per-query
  /// constant, so a key bias never affects the output.
  static AttentionWeights create(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t heads);
  /// Cross-attention layout: bias-free key, value and output projections,
  /// output projection zero-initialized.
  static AttentionWeights create_cross(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t heads);
};

/// softmax(q k^T / sqrt(d_head)) v over [batch, heads, len, d_head] operands.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionProbe* probe = nullptr);

/// Attention from `queries` [B, Lq, d] to `context` [B, Lk, d] including the
/// input and output projections. No residual.
Tensor attend(const AttentionWeights& w, const Tensor& queries, const Tensor& context, AttentionProbe* probe = nullptr);

/// [B, L, d] -> [B, H, L, d/H]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [B, H, L, dh] -> [B, L, H*dh]
Tensor merge_heads(const Tensor& x);

/// Central-difference check of every parameter of an f64 model against
/// autodiff, perturbing parameter storage in place. `max_coords` applies per
/// tensor. Each tensor's error is max_i |fd_i - ad_i| / max_i max(|fd_i|,
/// |ad_i|) over the checked coordinates (floored at 1e-8); returns the worst
/// tensor.
double param_grad_check(const std::function<Tensor()>& loss, ParameterSet& params,
                        const FiniteDiffOptions& options = {});

/// x * (1 + scale) + shift with [d] modulation vectors.
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);

}  // namespace stdit
