#include "imhsa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace imhsa {

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void Meter::on_alloc(std::size_t bytes) {
  bytes_allocated_ += bytes;
  live_bytes_ += bytes;
  peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  largest_ = std::max<std::uint64_t>(largest_, bytes);
  ++allocations_;
}

void Meter::on_free(std::size_t bytes) { live_bytes_ -= std::min<std::uint64_t>(bytes, live_bytes_); }

namespace {

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  check_shape(shape_);
  const auto n = shape_numel(shape_);
  if (dtype_ == DType::f32) {
    storage_ = std::vector<float>(n, 0.0f);
  } else {
    storage_ = std::vector<double>(n, 0.0);
  }
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(t.shape()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::filled(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&]<typename T>() { std::ranges::fill(t.data<T>(), static_cast<T>(value)); });
  return t;
}

Tensor Tensor::identity(std::size_t n, DType dtype) {
  Tensor t({n, n}, dtype);
  for (std::size_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
  return t;
}

Tensor::Tensor(const Tensor& other)
    : shape_(other.shape_), dtype_(other.dtype_), storage_(other.storage_), meter_(nullptr) {}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this != &other) {
    release();
    shape_ = other.shape_;
    dtype_ = other.dtype_;
    storage_ = other.storage_;
  }
  return *this;
}

Tensor::Tensor(Tensor&& other) noexcept
    : shape_(std::move(other.shape_)),
      dtype_(other.dtype_),
      storage_(std::move(other.storage_)),
      meter_(other.meter_) {
  other.meter_ = nullptr;
  other.shape_.clear();
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
  if (this != &other) {
    release();
    shape_ = std::move(other.shape_);
    dtype_ = other.dtype_;
    storage_ = std::move(other.storage_);
    meter_ = other.meter_;
    other.meter_ = nullptr;
    other.shape_.clear();
  }
  return *this;
}

Tensor::~Tensor() { release(); }

void Tensor::release() {
  if (meter_) {
    meter_->on_free(bytes());
    meter_ = nullptr;
  }
}

void Tensor::track(Meter* meter) {
  if (!meter || meter_ == meter) return;
  release();
  meter_ = meter;
  meter_->on_alloc(bytes());
}

std::size_t Tensor::extent(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::at(std::size_t flat) const {
  if (dtype_ == DType::f32) return std::get<std::vector<float>>(storage_).at(flat);
  return std::get<std::vector<double>>(storage_).at(flat);
}

void Tensor::set(std::size_t flat, double value) {
  if (dtype_ == DType::f32) {
    std::get<std::vector<float>>(storage_).at(flat) = static_cast<float>(value);
  } else {
    std::get<std::vector<double>>(storage_).at(flat) = value;
  }
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  auto values = to_vector();
  return from(shape_, values, dtype);
}

void Tensor::reshape_inplace(Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return dispatch(dtype_, [&]<typename T>() {
    for (T v : data<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_rel_diff shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(b.at(i)), floor);
    worst = std::max(worst, std::abs(a.at(i) - b.at(i)) / denom);
  }
  return worst;
}

double rel_error(const Tensor& a, const Tensor& reference) {
  double scale = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) scale = std::max(scale, std::abs(reference.at(i)));
  const double diff = max_abs_diff(a, reference);
  if (scale == 0.0) return diff;
  return diff / scale;
}

}  // namespace imhsa
