#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace orefsdet {

/// Raised when operand shapes violate an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed or missing input data (annotations, images, episode dirs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Per-thread accounting: live/peak tensor bytes and multiply-accumulates.
// Thread-local so concurrent forward passes never share mutable state.
// ---------------------------------------------------------------------------

struct EngineCounters {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
  std::int64_t macs = 0;
};

inline EngineCounters& counters() {
  thread_local EngineCounters c;
  return c;
}

inline void count_macs(std::int64_t n) { counters().macs += n; }

inline void reset_peak_bytes() { counters().peak_bytes = counters().live_bytes; }

/// Reads the MAC counter delta accumulated since construction.
class MacScope {
 public:
  MacScope() : start_(counters().macs) {}
  std::int64_t elapsed() const { return counters().macs - start_; }

 private:
  std::int64_t start_;
};

template <typename T>
struct CountingAllocator {
  using value_type = T;
  CountingAllocator() = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& c = counters();
    c.live_bytes += static_cast<std::int64_t>(n * sizeof(T));
    c.peak_bytes = std::max(c.peak_bytes, c.live_bytes);
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    counters().live_bytes -= static_cast<std::int64_t>(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

/// Dense row-major array. Feature maps use the C x H x W layout, with a
/// leading batch axis only where an op says so.
template <typename T>
class Tensor {
 public:
  using Storage = std::vector<T, CountingAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return {data_.data(), data_.size()}; }
  std::span<const T> values() const { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t h, std::size_t w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_) throw ShapeError("+= shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  Storage data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace orefsdet
