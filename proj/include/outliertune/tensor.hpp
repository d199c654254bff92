#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "outliertune/errors.hpp"

namespace otune {

// Dense row-major matrix. Floating-point matrices reject NaN/Inf on construction.
template <typename T>
class Mat {
 public:
  using value_type = T;

  Mat() = default;

  Mat(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    check_finite();
  }

  Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
    check_finite();
  }

  Mat(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    check_finite();
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool operator==(const Mat&) const = default;

 private:
  void check_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      for (T v : data_) {
        if (!std::isfinite(v)) throw DomainError("non-finite matrix entry");
      }
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatF = Mat<double>;
using MatI8 = Mat<std::int8_t>;
using MatI32 = Mat<std::int32_t>;

struct ColumnRange {
  std::vector<double> mins;
  std::vector<double> maxs;
};

// a * b with a fixed k-ascending accumulation order per output element.
MatF matmul_f64(const MatF& a, const MatF& b);

// a * b^T, same accumulation order. This is the Y = X W^T of a linear layer.
MatF matmul_abt(const MatF& a, const MatF& b);

MatF transpose(const MatF& a);
MatF identity(std::size_t n);

ColumnRange col_minmax(const MatF& x);

// Adds v to every row.
void add_row_vector(MatF& x, std::span<const double> v);

double frobenius_norm(const MatF& a);
// ||approx - ref||_F / ||ref||_F; 0 when both are zero.
double rel_frobenius_error(const MatF& approx, const MatF& ref);
double max_abs_diff(const MatF& a, const MatF& b);
double max_abs(const MatF& a);

// Stacks matrices with identical column counts vertically.
MatF vstack(std::span<const MatF> parts);
// Rows [begin, begin+count).
MatF slice_rows(const MatF& x, std::size_t begin, std::size_t count);

}  // namespace otune
