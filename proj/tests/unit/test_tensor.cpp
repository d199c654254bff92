#include <algorithm>
#include <random>

#include "doctest.h"
#include "outliertune/rng.hpp"
#include "outliertune/tensor.hpp"

using namespace otune;

namespace {

MatF random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& e : v) e = d(rng);
  return MatF(r, c, std::move(v));
}

}  // namespace

TEST_CASE("Mat rejects bad construction") {
  CHECK_THROWS_AS(MatF(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(MatF(1, 2, std::vector<double>{1, std::nan("")}), DomainError);
  CHECK_THROWS_AS(MatF(1, 1, std::vector<double>{INFINITY}), DomainError);
  CHECK_THROWS_AS((MatF{{1, 2}, {3}}), DimensionError);
  MatI8 codes(2, 3, std::int8_t{-7});
  CHECK(codes(1, 2) == -7);
}

TEST_CASE("matmul identity cases") {
  CHECK(matmul_f64(identity(2), identity(2)) == identity(2));
  const MatF a{{1, 2}, {3, 4}};
  CHECK(matmul_f64(a, MatF{{1, 0}, {0, 1}}) == a);
  CHECK_THROWS_AS(matmul_f64(a, MatF(3, 1)), DimensionError);
  CHECK_THROWS_AS(matmul_abt(a, MatF(1, 3)), DimensionError);
}

TEST_CASE("matmul matches a triple-loop oracle exactly") {
  auto rng = make_rng(11);
  for (int t = 0; t < 20; ++t) {
    const MatF a = random_mat(5, 7, rng), b = random_mat(7, 3, rng);
    const MatF c = matmul_f64(a, b);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
        CHECK(c(i, j) == s);
      }
    CHECK(matmul_abt(a, transpose(b)) == c);
    CHECK(matmul_f64(a, identity(7)) == a);
    CHECK(matmul_f64(a, b) == c);  // repeatable
  }
}

TEST_CASE("col_minmax") {
  const auto r = col_minmax(MatF{{1, -3}, {9, 0}});
  CHECK(r.mins == std::vector<double>{1, -3});
  CHECK(r.maxs == std::vector<double>{9, 0});
  const auto c = col_minmax(MatF(4, 3, 2.5));
  CHECK(c.mins == std::vector<double>(3, 2.5));
  CHECK(c.maxs == std::vector<double>(3, 2.5));
  CHECK_THROWS_AS(col_minmax(MatF()), DomainError);
  CHECK_THROWS_AS(col_minmax(MatF(0, 3)), DomainError);

  auto rng = make_rng(12);
  const MatF x = random_mat(100, 16, rng);
  const auto got = col_minmax(x);
  for (std::size_t c = 0; c < 16; ++c) {
    std::vector<double> col;
    for (std::size_t r = 0; r < 100; ++r) col.push_back(x(r, c));
    std::sort(col.begin(), col.end());
    CHECK(got.mins[c] == col.front());
    CHECK(got.maxs[c] == col.back());
  }
}

TEST_CASE("norms, stacking and slicing") {
  const MatF a{{3, 4}};
  CHECK(frobenius_norm(a) == 5.0);
  CHECK(rel_frobenius_error(a, a) == 0.0);
  CHECK(rel_frobenius_error(MatF(1, 2), MatF(1, 2)) == 0.0);
  CHECK(rel_frobenius_error(MatF{{3, 5}}, a) == doctest::Approx(0.2));
  CHECK(max_abs_diff(a, MatF{{2, 4}}) == 1.0);
  CHECK(max_abs(MatF{{-7, 2}}) == 7.0);
  const std::vector<MatF> parts{MatF{{1, 2}}, MatF{{3, 4}, {5, 6}}};
  const MatF s = vstack(parts);
  CHECK(s == MatF{{1, 2}, {3, 4}, {5, 6}});
  CHECK(slice_rows(s, 1, 2) == MatF{{3, 4}, {5, 6}});
  CHECK_THROWS_AS(slice_rows(s, 2, 2), DimensionError);
  MatF b = a;
  add_row_vector(b, std::vector<double>{1, -1});
  CHECK(b == MatF{{4, 3}});
  CHECK_THROWS_AS(add_row_vector(b, std::vector<double>{1}), DimensionError);
}
