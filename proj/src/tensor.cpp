#include "stdit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace stdit {

namespace {

std::atomic<std::size_t> g_live_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};
std::atomic<std::size_t> g_largest_buffer{0};
std::atomic<NodeId> g_next_id{1};

thread_local bool t_grad_enabled = true;

void atomic_max(std::atomic<std::size_t>& target, std::size_t value) {
  std::size_t seen = target.load(std::memory_order_relaxed);
  while (value > seen && !target.compare_exchange_weak(seen, value, std::memory_order_relaxed)) {
  }
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::shared_ptr<detail::Buffer> storage, DType dtype) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->dtype = dtype;
  node->storage = std::move(storage);
  node->id = detail::next_node_id();
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string to_string(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

std::size_t dtype_size(DType dtype) { return dtype == DType::f64 ? 8 : 4; }

namespace detail {

Buffer::Buffer(DType dtype, std::size_t count, bool zero) {
  if (dtype == DType::f64) {
    values = zero ? Storage<double>(count, 0.0) : Storage<double>(count);
  } else {
    values = zero ? Storage<float>(count, 0.0f) : Storage<float>(count);
  }
  track();
}

Buffer::Buffer(std::vector<float> v) : values(Storage<float>(v.begin(), v.end())) { track(); }
Buffer::Buffer(std::vector<double> v) : values(Storage<double>(v.begin(), v.end())) { track(); }

Buffer::~Buffer() { g_live_bytes.fetch_sub(bytes(), std::memory_order_relaxed); }

std::size_t Buffer::bytes() const {
  return std::visit([](const auto& v) { return v.size() * sizeof(v[0]); }, values);
}

void Buffer::track() {
  const std::size_t b = bytes();
  const std::size_t live = g_live_bytes.fetch_add(b, std::memory_order_relaxed) + b;
  atomic_max(g_peak_bytes, live);
  atomic_max(g_largest_buffer, b);
}

NodeId next_node_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const auto n = stdit::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::make_shared<detail::Buffer>(dtype, n), dtype));
}

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  if (stdit::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(stdit::numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  return Tensor(make_leaf(std::move(shape), std::make_shared<detail::Buffer>(std::move(values)), DType::f32));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (stdit::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(stdit::numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  return Tensor(make_leaf(std::move(shape), std::make_shared<detail::Buffer>(std::move(values)), DType::f64));
}

Tensor Tensor::from_doubles(Shape shape, std::span<const double> values, DType dtype) {
  if (dtype == DType::f64) return from(std::move(shape), std::vector<double>(values.begin(), values.end()));
  std::vector<float> f(values.size());
  std::transform(values.begin(), values.end(), f.begin(), [](double v) { return static_cast<float>(v); });
  return from(std::move(shape), std::move(f));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return stdit::numel(shape()); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

DType Tensor::dtype() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->dtype;
}

NodeId Tensor::id() const { return node_ ? node_->id : 0; }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

template <class T>
std::span<const T> Tensor::data() const {
  if (dtype() != dtype_of<T>()) {
    throw ContractError("tensor dtype is " + to_string(dtype()) + ", requested " + to_string(dtype_of<T>()));
  }
  const auto& v = std::get<detail::Storage<T>>(node_->storage->values);
  return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (dtype() != dtype_of<T>()) {
    throw ContractError("tensor dtype is " + to_string(dtype()) + ", requested " + to_string(dtype_of<T>()));
  }
  if (!is_leaf()) throw ContractError("mutable_data on a non-leaf tensor");
  auto& v = std::get<detail::Storage<T>>(node_->storage->values);
  return {v.data(), v.size()};
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::flat(std::size_t index) const {
  if (index >= numel()) throw ShapeError("flat index out of range");
  return dispatch(dtype(), [&](auto tag) { return static_cast<double>(data<decltype(tag)>()[index]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return flat(0);
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at(): index rank mismatch for " + to_string(s));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("at(): index out of range for " + to_string(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return flat(offset);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    auto d = data<decltype(tag)>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(shape(), node_->storage, node_->dtype));
}

Tensor Tensor::clone() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return Tensor::from(shape(), std::vector<T>(d.begin(), d.end()));
  });
}

MemoryStats memory_stats() {
  return {g_live_bytes.load(), g_peak_bytes.load(), g_largest_buffer.load()};
}

void reset_memory_peaks() {
  g_peak_bytes.store(g_live_bytes.load());
  g_largest_buffer.store(0);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace stdit
