#include "outliertune/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace otune {

MatF matmul_f64(const MatF& a, const MatF& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " by " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()));
  }
  MatF out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

MatF matmul_abt(const MatF& a, const MatF& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_abt: inner dims " + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.cols()));
  }
  MatF out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

MatF transpose(const MatF& a) {
  MatF out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

MatF identity(std::size_t n) {
  MatF out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

ColumnRange col_minmax(const MatF& x) {
  if (x.rows() == 0 || x.cols() == 0) throw DomainError("col_minmax: empty matrix");
  ColumnRange r{{x.row(0).begin(), x.row(0).end()}, {x.row(0).begin(), x.row(0).end()}};
  for (std::size_t i = 1; i < x.rows(); ++i) {
    const auto row = x.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) {
      r.mins[c] = std::min(r.mins[c], row[c]);
      r.maxs[c] = std::max(r.maxs[c], row[c]);
    }
  }
  return r;
}

void add_row_vector(MatF& x, std::span<const double> v) {
  if (v.size() != x.cols()) throw DimensionError("add_row_vector: length mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += v[c];
  }
}

double frobenius_norm(const MatF& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return std::sqrt(acc);
}

double rel_frobenius_error(const MatF& approx, const MatF& ref) {
  if (approx.rows() != ref.rows() || approx.cols() != ref.cols())
    throw DimensionError("rel_frobenius_error: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = approx.data()[i] - ref.data()[i];
    num += d * d;
    den += ref.data()[i] * ref.data()[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : INFINITY;
  return std::sqrt(num / den);
}

double max_abs_diff(const MatF& a, const MatF& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double max_abs(const MatF& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

MatF vstack(std::span<const MatF> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("vstack: column mismatch");
    data.insert(data.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return MatF(rows, cols, std::move(data));
}

MatF slice_rows(const MatF& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) throw DimensionError("slice_rows: out of range");
  const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * x.cols());
  return MatF(count, x.cols(),
              std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * x.cols())));
}

}  // namespace otune
