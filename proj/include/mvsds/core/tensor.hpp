#pragma once

#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mvsds/core/common.hpp"
#include "mvsds/core/rng.hpp"

namespace mvsds {

namespace detail {
// Training/rendering steps cycle many large, similarly sized buffers. With
// default glibc settings those land in per-allocation mmaps, so every step
// pays the page-fault cost again; keeping them on the heap lets the pages
// stay hot.
inline bool retain_heap_pages() {
#if defined(__GLIBC__) && !defined(MVSDS_DISABLE_MALLOC_TUNING)
  static bool done = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, -1);
    return true;
  }();
  return done;
#else
  return false;
#endif
}
}  // namespace detail

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor. Copies share storage; use clone() for a deep copy.
// The default constructor-from-shape zero-fills; ops that overwrite every
// element allocate with uninitialized() to avoid the memset.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), size_(shape_numel(shape_)) {
    allocate();
    std::fill(data(), data() + size_, T(0));
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), size_(shape_numel(shape_)) {
    MVSDS_CHECK(static_cast<int64_t>(values.size()) == size_,
                "value count does not match shape ", shape_str(shape_));
    allocate();
    std::copy(values.begin(), values.end(), data());
  }

  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = shape_numel(t.shape_);
    t.allocate();
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor randn(Shape shape, Rng& rng, T scale = T(1)) {
    Tensor t = uninitialized(std::move(shape));
    for (int64_t i = 0; i < t.size_; ++i)
      t.storage_[static_cast<size_t>(i)] = static_cast<T>(rng.normal()) * scale;
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t = uninitialized(std::move(shape));
    for (int64_t i = 0; i < t.size_; ++i)
      t.storage_[static_cast<size_t>(i)] = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return size_; }

  T* data() { return storage_.get(); }
  const T* data() const { return storage_.get(); }
  T& operator[](int64_t i) { return storage_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return storage_[static_cast<size_t>(i)]; }

  void fill(T value) { std::fill(data(), data() + size_, value); }

  Tensor clone() const {
    if (!defined()) return Tensor();
    Tensor t = uninitialized(shape_);
    std::copy(data(), data() + size_, t.data());
    return t;
  }

  // Same storage, new shape with identical element count.
  Tensor reshaped(Shape shape) const {
    MVSDS_REQUIRE(shape_numel(shape) == numel(), "reshape ", shape_str(shape_),
                  " -> ", shape_str(shape), " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = size_;
    t.storage_ = storage_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out = Tensor<U>::uninitialized(shape_);
    const T* src = data();
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(src[i]);
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    const T* p = data();
    for (int64_t i = 0; i < size_; ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
  }

  // Serial double-accumulated reductions.
  double sum() const {
    double acc = 0.0;
    const T* p = data();
    for (int64_t i = 0; i < size_; ++i) acc += static_cast<double>(p[i]);
    return acc;
  }

  double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

  double max_abs() const {
    double m = 0.0;
    const T* p = data();
    for (int64_t i = 0; i < size_; ++i)
      m = std::max(m, std::abs(static_cast<double>(p[i])));
    return m;
  }

 private:
  // Storage is 64-byte aligned: SIMD kernels peel loops based on pointer
  // alignment, so a fixed alignment keeps results bit-identical across
  // allocations.
  void allocate() {
    detail::retain_heap_pages();
    size_t bytes = (static_cast<size_t>(size_) * sizeof(T) + 63) & ~size_t{63};
    void* p = bytes == 0 ? nullptr : std::aligned_alloc(64, bytes);
    MVSDS_CHECK(bytes == 0 || p != nullptr, "allocation of ", bytes, " bytes failed");
    storage_ = std::shared_ptr<T[]>(static_cast<T*>(p), [](T* q) { std::free(q); });
  }

  Shape shape_;
  int64_t size_ = 0;
  std::shared_ptr<T[]> storage_;

  template <typename U>
  friend class Tensor;
};

}  // namespace mvsds
