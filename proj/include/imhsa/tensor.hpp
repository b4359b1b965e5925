#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace imhsa {

/// Raised when operand shapes or dtypes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// FLOP and allocation accounting sink.
///
/// Ops take an optional `Meter*`. Every output tensor an instrumented op
/// materializes is registered here; it counts as live until the tensor is
/// destroyed (or its buffer is handed to another op by rvalue). The meter must
/// outlive every tensor tracked against it.
class Meter {
 public:
  void add_flops(std::uint64_t n) { flops_ += n; }
  void on_alloc(std::size_t bytes);
  void on_free(std::size_t bytes);

  std::uint64_t flops() const { return flops_; }
  std::uint64_t bytes_allocated() const { return bytes_allocated_; }
  std::uint64_t peak_bytes() const { return peak_bytes_; }
  std::uint64_t live_bytes() const { return live_bytes_; }
  std::uint64_t largest_allocation() const { return largest_; }
  std::uint64_t allocations() const { return allocations_; }

 private:
  std::uint64_t flops_ = 0;
  std::uint64_t bytes_allocated_ = 0;
  std::uint64_t live_bytes_ = 0;
  std::uint64_t peak_bytes_ = 0;
  std::uint64_t largest_ = 0;
  std::uint64_t allocations_ = 0;
};

/// Dense row-major tensor with a per-tensor dtype tag.
///
/// Copies are plain value copies and are never tracked by a meter; moves carry
/// the tracking registration along with the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);
  static Tensor filled(Shape shape, double value, DType dtype = DType::f32);
  static Tensor identity(std::size_t n, DType dtype = DType::f32);

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&& other) noexcept;
  Tensor& operator=(Tensor&& other) noexcept;
  ~Tensor();

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return shape_numel(shape_); }
  std::size_t extent(std::ptrdiff_t axis) const;
  DType dtype() const { return dtype_; }
  std::size_t bytes() const { return size() * dtype_size(dtype_); }
  bool empty() const { return shape_.empty(); }

  template <typename T>
  std::span<T> data() {
    check_type<T>();
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> data() const {
    check_type<T>();
    return std::get<std::vector<T>>(storage_);
  }

  double at(std::size_t flat) const;
  void set(std::size_t flat, double value);
  std::vector<double> to_vector() const;
  Tensor to(DType dtype) const;

  /// Reinterprets the buffer under a new shape with equal element count.
  void reshape_inplace(Shape shape);

  /// Registers this tensor's bytes as live in `meter` (no-op when null).
  void track(Meter* meter);
  bool tracked() const { return meter_ != nullptr; }

  bool all_finite() const;

 private:
  template <typename T>
  void check_type() const {
    if (dtype_ != dtype_of<T>()) {
      throw ShapeError(std::string("tensor dtype is ") + dtype_name(dtype_) +
                       ", requested " + dtype_name(dtype_of<T>()));
    }
  }
  void release();

  Shape shape_;
  DType dtype_ = DType::f32;
  std::variant<std::vector<float>, std::vector<double>> storage_;
  Meter* meter_ = nullptr;
};

/// Invokes `fn.template operator()<T>()` with T matching `dtype`.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

/// Bitwise equality of shape, dtype and contents.
bool bit_equal(const Tensor& a, const Tensor& b);

/// Elementwise worst case: max over i of |a_i - b_i| / max(|b_i|, floor).
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// Scale-relative error: max |a - b| / max |b|. Used for kernel-vs-oracle checks,
/// where isolated near-zero reference entries would make the elementwise form meaningless.
double rel_error(const Tensor& a, const Tensor& reference);

}  // namespace imhsa
