#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <vector>

namespace epiguide {

// 64-byte aligned storage. Eigen's vectorized loops peel unaligned leading
// elements, so with plain malloc alignment the summation order (and the last
// bits of every product) would depend on where the buffer happened to land.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedDoubles = std::vector<double, AlignedAllocator<double>>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }

  std::span<double> row(int r) {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::span<const double> row(int r) const {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  AlignedDoubles& values() { return data_; }
  const AlignedDoubles& values() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix& o) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  AlignedDoubles data_;
};

}  // namespace epiguide
