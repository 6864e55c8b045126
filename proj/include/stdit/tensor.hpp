#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace stdit {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

/// Raised when tensor extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a caller breaks an API precondition that is not about shapes.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for unreadable, malformed or unwritable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn(double{});
  return fn(float{});
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

class Tensor;

namespace detail {

/// Allocator that default-initializes, so sized construction skips zero-fill.
template <class T>
struct UninitAllocator : std::allocator<T> {
  using value_type = T;
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};

template <class T>
using Storage = std::vector<T, UninitAllocator<T>>;

struct Buffer {
  /// Zero-filled unless `zero` is false, in which case contents are
  /// indeterminate and the caller must write every element.
  Buffer(DType dtype, std::size_t count, bool zero = true);
  explicit Buffer(std::vector<float> values);
  explicit Buffer(std::vector<double> values);
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;
  ~Buffer();

  std::size_t bytes() const;

  std::variant<Storage<float>, Storage<double>> values;

 private:
  void track();
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad, const Tensor& out)>;

struct Node {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> storage;
  NodeId id = 0;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool released = false;  // saved state freed by a backward sweep
};

NodeId next_node_id();

}  // namespace detail

/// Dense row-major tensor. A Tensor is a cheap handle; copies share the node.
///
/// Values are immutable once an op has produced them. The one exception is
/// `mutable_data()` on leaves, which optimizers use between passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor ones(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor from(Shape shape, std::vector<double> values);
  /// Converts `values` to `dtype`.
  static Tensor from_doubles(Shape shape, std::span<const double> values, DType dtype);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent of `axis`; negative axes count from the end.
  std::size_t dim(int axis) const;
  DType dtype() const;
  NodeId id() const;
  const char* op_name() const;

  bool requires_grad() const;
  /// Marks a leaf as a gradient target. Throws on non-leaf tensors.
  Tensor& set_requires_grad(bool flag = true);
  bool is_leaf() const;

  template <class T>
  std::span<const T> data() const;

  /// Writable view of a leaf's storage. Do not call while a graph that
  /// references this tensor is alive.
  template <class T>
  std::span<T> mutable_data();

  double item() const;
  /// Element at flat row-major index, converted to double.
  double flat(std::size_t index) const;
  double at(std::initializer_list<std::size_t> index) const;
  std::vector<double> to_vector() const;

  /// New leaf sharing storage, detached from any graph.
  Tensor detach() const;
  /// New leaf with its own copy of the data.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Allocation counters for tensor storage, process-wide.
struct MemoryStats {
  std::size_t live_bytes = 0;
  std::size_t peak_live_bytes = 0;
  std::size_t largest_buffer_bytes = 0;
};

MemoryStats memory_stats();
/// Resets peak and largest-buffer counters to the current live state.
void reset_memory_peaks();

/// Thread-local switch for graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace stdit
