#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/rng.hpp"

namespace nf {

using i64 = std::int64_t;

// All tensor buffers are 64-byte aligned so that vectorized kernels take the
// same code path (and therefore round identically) for every allocation.
// Without this, reductions over unaligned maps can split scalar/SIMD work at
// positions that depend on the heap address, breaking bit-reproducibility.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U, Align>&) const { return false; }
};

using DoubleVec = std::vector<double, AlignedAllocator<double, 64>>;

// Dense row-major shape, rank 0..4.  Rank 0 is a scalar with one element.
struct Shape {
  std::array<i64, 4> dim{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<i64> dims) {
    NF_CHECK(dims.size() <= 4, "rank > 4 unsupported");
    rank = int(dims.size());
    int i = 0;
    for (i64 d : dims) {
      NF_CHECK(d >= 0, "negative extent");
      dim[std::size_t(i++)] = d;
    }
  }

  i64 operator[](int i) const {
    NF_CHECK(i >= 0 && i < rank, "shape index " << i << " out of rank " << rank);
    return dim[std::size_t(i)];
  }

  i64 numel() const {
    i64 n = 1;
    for (int i = 0; i < rank; ++i) n *= dim[std::size_t(i)];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (dim[std::size_t(i)] != o.dim[std::size_t(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[";
    for (int i = 0; i < rank; ++i) os << (i ? "," : "") << dim[std::size_t(i)];
    os << "]";
    return os.str();
  }
};

// Dense 64-bit float tensor.  Storage is shared so reshapes are zero-copy;
// mutating helpers require unique ownership of the buffer.
struct Tensor {
  Shape shape;
  std::shared_ptr<DoubleVec> data;

  Tensor() : data(std::make_shared<DoubleVec>()) {}

  explicit Tensor(Shape s)
      : shape(s), data(std::make_shared<DoubleVec>(std::size_t(s.numel()), 0.0)) {}

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor full(Shape s, double v) {
    Tensor t(s);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full(Shape{}, v); }

  static Tensor from(Shape s, std::initializer_list<double> vals) {
    Tensor t(s);
    NF_CHECK(i64(vals.size()) == s.numel(), "value count " << vals.size() << " != numel " << s.numel());
    std::copy(vals.begin(), vals.end(), t.data->begin());
    return t;
  }

  static Tensor from(Shape s, const std::vector<double>& vals) {
    Tensor t(s);
    NF_CHECK(i64(vals.size()) == s.numel(), "value count " << vals.size() << " != numel " << s.numel());
    std::copy(vals.begin(), vals.end(), t.data->begin());
    return t;
  }

  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(s);
    for (double& v : *t.data) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor t(s);
    for (double& v : *t.data) v = rng.normal(mean, stddev);
    return t;
  }

  i64 numel() const { return shape.numel(); }
  // a default-constructed Tensor is a rank-0 scalar with no storage; optional
  // tensors are tested for presence with this, not numel()
  bool empty() const { return data->empty(); }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double& at(i64 i) { return (*data)[std::size_t(i)]; }
  double at(i64 i) const { return (*data)[std::size_t(i)]; }

  // Deep copy (new buffer).
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<DoubleVec>(*data);
    return t;
  }

  // Same buffer, new shape (must preserve numel).
  Tensor reshaped(Shape s) const {
    NF_CHECK(s.numel() == numel(), "reshape " << shape.str() << " -> " << s.str());
    Tensor t;
    t.shape = s;
    t.data = data;
    return t;
  }

  bool all_finite() const {
    for (double v : *data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace nf
