#pragma once

#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "stdit/tensor.hpp"

namespace stdit {

/// Gradients of a scalar loss keyed by leaf node id.
class GradMap {
 public:
  /// Gradient for `leaf`, or nullptr when the loss does not depend on it.
  const Tensor* find(const Tensor& leaf) const;
  /// Gradient for `leaf`; zeros of the leaf's shape when absent.
  Tensor get(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const { return find(leaf) != nullptr; }
  std::size_t size() const { return grads_.size(); }
  const std::unordered_map<NodeId, Tensor>& entries() const { return grads_; }

  void insert(NodeId id, Tensor grad) { grads_[id] = std::move(grad); }

 private:
  std::unordered_map<NodeId, Tensor> grads_;
};

/// Reverse-mode sweep from a scalar `loss`. Visits each reachable node once in
/// reverse topological order and sums gradients across fan-out. Returns the
/// gradient of every leaf marked `requires_grad`. The graph's saved state is
/// released afterwards, so a second call on the same loss is an error.
GradMap backward(const Tensor& loss);

struct FiniteDiffOptions {
  double eps = 1e-5;
  /// Check at most this many coordinates, chosen uniformly without
  /// replacement with `seed`. Zero means all coordinates.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Central-difference check of d f / d x against autodiff. Returns
/// max_i |fd_i - ad_i| / max(|fd_i|, |ad_i|, 1e-8). `x` must be an f64 leaf;
/// `f` receives a fresh leaf each call and must return a scalar.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         const FiniteDiffOptions& options = {});

namespace detail {

/// Wraps a freshly computed buffer as an op result. Checks every value is
/// finite, then records `inputs` and `backward` when any input requires grad
/// and recording is enabled. `backward` returns one gradient per input (an
/// undefined Tensor for inputs that get none).
Tensor make_op(const char* op, Shape shape, std::shared_ptr<Buffer> storage, std::vector<Tensor> inputs,
               BackwardFn backward);

/// Shares `storage` under a new shape, recording a reshape when needed.
Tensor make_view(const char* op, const Tensor& source, Shape shape);

}  // namespace detail

}  // namespace stdit
