#include <random>

#include "../oracle.hpp"
#include "doctest.h"
#include "outliertune/qgemm.hpp"
#include "outliertune/rng.hpp"

using namespace otune;

namespace {

const QScheme kTensor{8, Symmetry::kSymmetric, Axis::kPerTensor};
const QScheme kToken{8, Symmetry::kSymmetric, Axis::kPerToken};
const QScheme kChannel{8, Symmetry::kSymmetric, Axis::kPerChannel};

QTensor from_ints(const MatI8& ints, const QScheme& s, std::vector<double> scales) {
  QTensor q{ints, s, std::move(scales), {}};
  q.zero_points.assign(q.scales.size(), 0);
  return q;
}

QScheme x_scheme(GemmVariant v, int bits) {
  switch (v) {
    case GemmVariant::kTensorTensor: return {bits, Symmetry::kSymmetric, Axis::kPerTensor};
    case GemmVariant::kTokenChannel: return {bits, Symmetry::kSymmetric, Axis::kPerToken};
    default: return {bits, Symmetry::kSymmetric, Axis::kPerChannel};
  }
}

}  // namespace

TEST_CASE("tensor_tensor examples") {
  const MatI8 eye{{1, 0}, {0, 1}};
  auto r = gemm_tensor_tensor(from_ints(eye, kTensor, {1.0}), from_ints(eye, kTensor, {1.0}));
  CHECK(r.y == identity(2));
  const MatI8 a{{1, 2}, {3, 4}}, b{{5, 6}, {7, 8}};
  r = gemm_tensor_tensor(from_ints(a, kTensor, {0.5}), from_ints(b, kTensor, {2.0}));
  CHECK(r.y == MatF{{19, 22}, {43, 50}});
  CHECK(r.count == OpCount{8, 8, 4, 0});
}

TEST_CASE("token_channel examples") {
  const MatI8 a{{1, -2, 3}}, b{{1, 0}, {2, 1}, {-1, 4}};
  auto r = gemm_token_channel(from_ints(a, kToken, {1.0}), from_ints(b, kChannel, {1.0, 1.0}));
  CHECK(r.y == MatF{{-6, 10}});
  CHECK(r.count.scale_mults == 2 * 1 * 2);
  // One row reduces to the per-tensor case.
  const auto tt = gemm_tensor_tensor(from_ints(a, kTensor, {0.25}), from_ints(b, kTensor, {0.5}));
  const auto tc = gemm_token_channel(from_ints(a, kToken, {0.25}), from_ints(b, kChannel, {0.5, 0.5}));
  CHECK(tt.y == tc.y);
}

TEST_CASE("channel_naive examples") {
  auto rng = make_rng(31);
  const auto x = oracle::random_qtensor(8, 16, kChannel, rng);
  const auto w = oracle::random_qtensor(16, 4, kChannel, rng);
  const auto r = gemm_channel_naive(x, w);
  CHECK(r.count.scale_mults == 544);
  CHECK(r.y == oracle::gemm(GemmVariant::kChannelChannelNaive, x, w));

  // Uniform activation scales reduce to the per-tensor kernel (w per-tensor too).
  auto xu = x;
  xu.scales.assign(16, 0.5);
  auto wt = from_ints(w.ints, kTensor, {0.25});
  auto wc = from_ints(w.ints, kChannel, std::vector<double>(4, 0.25));
  const auto tt = gemm_tensor_tensor(from_ints(x.ints, kTensor, {0.5}), wt);
  CHECK(max_abs_diff(gemm_channel_naive(xu, wc).y, tt.y) <= 1e-12 * max_abs(tt.y));

  // n = 1 is a scaled outer product.
  const auto x1 = oracle::random_qtensor(3, 1, kChannel, rng);
  const auto w1 = oracle::random_qtensor(1, 5, kChannel, rng);
  const auto o = gemm_channel_naive(x1, w1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(o.y(i, j) == w1.scales[j] * (x1.scales[0] * (double(x1.code(i, 0)) * double(w1.code(0, j)))));
}

TEST_CASE("channel_folded examples") {
  auto rng = make_rng(32);
  auto x = oracle::random_qtensor(8, 16, kChannel, rng);
  const auto w = oracle::random_qtensor(16, 4, kChannel, rng);
  const auto r = gemm_channel_folded(x, w);
  CHECK(r.y == oracle::gemm(GemmVariant::kChannelChannelFolded, x, w));
  CHECK(r.count.scale_mults == 8 * 4);
  // Unit activation scales: folding is a no-op and both kernels agree exactly.
  x.scales.assign(16, 1.0);
  CHECK(gemm_channel_folded(x, w).y == gemm_channel_naive(x, w).y);
  // Identity codes pick out the weight scales.
  const MatI8 eye{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const auto id = gemm_channel_folded(from_ints(eye, kChannel, {9, 9, 9}), from_ints(eye, kChannel, {0.5, 2, 3}));
  CHECK(id.y == MatF{{0.5, 0, 0}, {0, 2, 0}, {0, 0, 3}});
}

TEST_CASE("all variants equal the f64 oracle bit for bit") {
  auto rng = make_rng(33);
  std::uniform_int_distribution<std::size_t> dim(1, 24);
  for (int t = 0; t < 200; ++t) {
    const auto v = static_cast<GemmVariant>(t % 4);
    const int bits = std::array{4, 6, 8}[t % 3];
    const bool asym = v != GemmVariant::kTensorTensor && t % 2 == 1;
    const std::size_t i = dim(rng), n = dim(rng), j = dim(rng);
    const auto x = oracle::random_qtensor(i, n, x_scheme(v, bits), rng, t % 7 == 0);
    const QScheme ws{bits, asym ? Symmetry::kAsymmetric : Symmetry::kSymmetric,
                     v == GemmVariant::kTensorTensor ? Axis::kPerTensor : Axis::kPerChannel};
    const auto w = oracle::random_qtensor(n, j, ws, rng, t % 5 == 0);
    const auto r = gemm(v, x, w);
    CHECK(r.y == oracle::gemm(v, x, w));
    CHECK(r.count == expected_op_count(v, i, n, j, asym));
    CHECK(r.count.int_mults == i * n * j);
  }
}

TEST_CASE("op-count law") {
  CHECK(expected_op_count(GemmVariant::kChannelChannelNaive, 1, 1, 1, false).scale_mults -
            expected_op_count(GemmVariant::kChannelChannelFolded, 1, 1, 1, false).scale_mults ==
        1);
  CHECK(expected_op_count(GemmVariant::kChannelChannelNaive, 8, 16, 4, true).scale_mults -
            expected_op_count(GemmVariant::kChannelChannelFolded, 8, 16, 4, true).scale_mults ==
        512);
  CHECK(expected_op_count(GemmVariant::kTokenChannel, 3, 5, 7, false).scale_mults == 42);
  CHECK(expected_op_count(GemmVariant::kTensorTensor, 3, 5, 7, false).scale_mults == 21);
  CHECK(expected_op_count(GemmVariant::kChannelChannelFolded, 3, 5, 7, true).zp_mults == 21);
}

TEST_CASE("scheme contracts") {
  auto rng = make_rng(34);
  const auto xt = oracle::random_qtensor(2, 3, kTensor, rng);
  const auto xk = oracle::random_qtensor(2, 3, kToken, rng);
  const auto xc = oracle::random_qtensor(2, 3, kChannel, rng);
  const auto wc = oracle::random_qtensor(3, 2, kChannel, rng);
  const auto wt = oracle::random_qtensor(3, 2, kTensor, rng);
  const auto wa = oracle::random_qtensor(3, 2, {8, Symmetry::kAsymmetric, Axis::kPerTensor}, rng);
  CHECK_THROWS_AS(gemm_tensor_tensor(xk, wt), ContractError);
  CHECK_THROWS_AS(gemm_tensor_tensor(xt, wc), ContractError);
  CHECK_THROWS_AS(gemm_tensor_tensor(xt, wa), ContractError);
  CHECK_THROWS_AS(gemm_token_channel(xc, wc), ContractError);
  CHECK_THROWS_AS(gemm_token_channel(xk, wt), ContractError);
  CHECK_THROWS_AS(gemm_channel_naive(xk, wc), ContractError);
  CHECK_THROWS_AS(gemm_channel_folded(xt, wc), ContractError);
  const auto xa = oracle::random_qtensor(2, 3, {8, Symmetry::kAsymmetric, Axis::kPerChannel}, rng);
  CHECK_THROWS_AS(gemm_channel_folded(xa, wc), ContractError);
  CHECK_THROWS_AS(gemm_channel_folded(xc, oracle::random_qtensor(4, 2, kChannel, rng)), DimensionError);
  auto broken = wc;
  broken.scales[0] = -1;
  CHECK_THROWS_AS(gemm_channel_folded(xc, broken), ContractError);
  CHECK(parse_variant("channel_folded") == GemmVariant::kChannelChannelFolded);
  CHECK_THROWS_AS(parse_variant("eq9"), ContractError);
}

TEST_CASE("inner-dimension bound") {
  const std::size_t n = kMaxInnerDim;
  // Worst-case magnitudes at the bound stay inside int32.
  QTensor x{MatI8(1, n, std::int8_t{127}), kChannel, std::vector<double>(n, 1.0), std::vector<std::int32_t>(n, 0)};
  QTensor w{MatI8(n, 1, std::int8_t{-127}), kChannel, {1.0}, {0}};
  const auto r = gemm_channel_folded(x, w);
  CHECK(r.y(0, 0) == -127.0 * 127.0 * static_cast<double>(n));
  QTensor x2{MatI8(1, n + 1, std::int8_t{1}), kChannel, std::vector<double>(n + 1, 1.0),
             std::vector<std::int32_t>(n + 1, 0)};
  QTensor w2{MatI8(n + 1, 1, std::int8_t{1}), kChannel, {1.0}, {0}};
  CHECK_THROWS_AS(gemm_channel_folded(x2, w2), ContractError);
}
