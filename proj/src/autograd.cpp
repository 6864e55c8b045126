#include "stdit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <type_traits>
#include <unordered_set>

#include "stdit/ops.hpp"

namespace stdit {

const Tensor* GradMap::find(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor GradMap::get(const Tensor& leaf) const {
  if (const Tensor* g = find(leaf)) return *g;
  return Tensor::zeros(leaf.shape(), leaf.dtype());
}

namespace detail {

namespace {

template <class T>
bool all_finite(const detail::Storage<T>& values) {
  // Exponent all ones means inf or nan; integer OR-reduction vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  const T* p = values.data();
  const std::size_t n = values.size();
  for (std::size_t i = 0; i < n; ++i) {
    Bits b;
    std::memcpy(&b, p + i, sizeof(T));
    bad |= static_cast<Bits>((b & mask) == mask);
  }
  return bad == 0;
}

template <class T>
void check_finite(const char* op, const detail::Storage<T>& values, const Shape& shape) {
  if (all_finite(values)) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("op '") + op + "' produced a non-finite value (" + std::to_string(values[i]) +
                         ") at flat index " + std::to_string(i) + " of shape " + to_string(shape));
    }
  }
}

Tensor value_view(const std::shared_ptr<Node>& node) {
  auto view = std::make_shared<Node>();
  view->shape = node->shape;
  view->dtype = node->dtype;
  view->storage = node->storage;
  view->id = next_node_id();
  return Tensor(std::move(view));
}

}  // namespace

Tensor make_op(const char* op, Shape shape, std::shared_ptr<Buffer> storage, std::vector<Tensor> inputs,
               BackwardFn backward) {
  std::visit([&](const auto& v) { check_finite(op, v, shape); }, storage->values);
  auto node = std::make_shared<Node>();
  node->dtype = std::holds_alternative<detail::Storage<double>>(storage->values) ? DType::f64 : DType::f32;
  node->shape = std::move(shape);
  node->storage = std::move(storage);
  node->id = next_node_id();
  node->op = op;
  const bool track = grad_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_view(const char* op, const Tensor& source, Shape shape) {
  const Shape from = source.shape();
  auto storage = source.node()->storage;
  auto node = std::make_shared<Node>();
  node->dtype = source.dtype();
  node->shape = std::move(shape);
  node->storage = std::move(storage);
  node->id = next_node_id();
  node->op = op;
  if (grad_enabled() && source.requires_grad()) {
    node->requires_grad = true;
    node->inputs = {source};
    node->backward = [from](const Tensor& g, const Tensor&) -> std::vector<Tensor> { return {reshape(g, from)}; };
  }
  return Tensor(std::move(node));
}

}  // namespace detail

GradMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any tensor requiring grad");

  using NodePtr = std::shared_ptr<detail::Node>;
  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<NodePtr> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->released) throw ContractError("backward: graph already consumed by a previous backward call");
    if (next < node->inputs.size()) {
      const NodePtr& child = node->inputs[next++].node();
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  NoGradGuard no_grad;
  std::unordered_map<const detail::Node*, Tensor> grads;
  grads.emplace(loss.node().get(), Tensor::ones(loss.shape(), loss.dtype()));
  GradMap result;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& node = *it;
    auto found = grads.find(node.get());
    if (found == grads.end()) continue;
    Tensor g = std::move(found->second);
    grads.erase(found);
    if (!node->backward) {
      result.insert(node->id, std::move(g));
      continue;
    }
    Tensor out = detail::value_view(node);
    std::vector<Tensor> input_grads = node->backward(g, out);
    for (std::size_t i = 0; i < node->inputs.size() && i < input_grads.size(); ++i) {
      const Tensor& input = node->inputs[i];
      Tensor& ig = input_grads[i];
      if (!input.requires_grad() || !ig.defined()) continue;
      if (ig.shape() != input.shape()) {
        throw ContractError(std::string("backward: op '") + node->op + "' returned gradient of shape " +
                            to_string(ig.shape()) + " for input of shape " + to_string(input.shape()));
      }
      auto [slot, inserted] = grads.try_emplace(input.node().get(), ig);
      if (!inserted) slot->second = add(slot->second, ig);
    }
    node->inputs.clear();
    node->backward = nullptr;
    node->released = true;
    node->requires_grad = false;
  }
  return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         const FiniteDiffOptions& options) {
  if (x.dtype() != DType::f64) throw ContractError("finite_diff_check: x must be f64");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  const Tensor y = f(leaf);
  if (y.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
  std::vector<double> analytic(x.numel(), 0.0);
  if (y.requires_grad()) analytic = backward(y).get(leaf).to_vector();

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i : coords) {
    Tensor plus = x.clone();
    Tensor minus = x.clone();
    plus.mutable_data<double>()[i] += options.eps;
    minus.mutable_data<double>()[i] -= options.eps;
    const double fd = (f(plus).item() - f(minus).item()) / (2.0 * options.eps);
    const double ad = analytic[i];
    const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace stdit
