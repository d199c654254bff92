#include "outliertune/qgemm.hpp"

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

namespace otune {

namespace {

using i64 = std::int64_t;

void require(bool ok, const char* what) {
  if (!ok) throw ContractError(what);
}

void check_shapes(const QTensor& xq, const QTensor& wq) {
  if (xq.cols() != wq.rows())
    throw DimensionError("gemm: inner dims " + std::to_string(xq.cols()) + " vs " +
                         std::to_string(wq.rows()));
  if (xq.cols() > kMaxInnerDim)
    throw ContractError("gemm: inner dim exceeds " + std::to_string(kMaxInnerDim));
  xq.validate();
  wq.validate();
  require(xq.scheme.symmetric(), "gemm: activations must be symmetric");
}

// W (n x j) repacked as j rows of n codes so the reduction walks contiguous memory.
std::vector<std::int8_t> pack_columns(const QTensor& wq) {
  const std::size_t n = wq.rows(), j = wq.cols();
  std::vector<std::int8_t> packed(n * j);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t c = 0; c < j; ++c) packed[c * n + k] = wq.ints(k, c);
  return packed;
}

i64 max_abs_code(const MatI8& m) {
  i64 best = 0;
  for (std::int8_t v : m.data()) best = std::max<i64>(best, std::abs(static_cast<i64>(v)));
  return best;
}

// Integer accumulators acc[r][c] = sum_k X[r][k] * (W[k][c] - zw[c]) in int32, where zw is
// the storage-domain weight zero point. The zero-point term is applied once per output
// through the row sums of X.
struct IntAccum {
  std::vector<std::int32_t> acc;
  OpCount count;
};

IntAccum integer_reduce(const QTensor& xq, const QTensor& wq) {
  const std::size_t i_dim = xq.rows(), n = xq.cols(), j_dim = wq.cols();
  const auto packed = pack_columns(wq);
  const bool asym = !wq.scheme.symmetric();

  std::vector<std::int32_t> wzero(j_dim, 0);
  if (asym)
    for (std::size_t c = 0; c < j_dim; ++c) wzero[c] = wq.storage_zero(wq.param_index(0, c));

  // |sum| <= n * max|x| * max|w|; the fast path runs only when that cannot reach 2^31.
  const i64 xmax = max_abs_code(xq.ints);
  const i64 wmax = max_abs_code(wq.ints);
  const bool fits = static_cast<i64>(n) * xmax * wmax < std::numeric_limits<std::int32_t>::max();

  IntAccum out{std::vector<std::int32_t>(i_dim * j_dim), {}};
  std::vector<i64> rowsum(i_dim, 0);
  for (std::size_t r = 0; r < i_dim; ++r) {
    const std::int8_t* xr = xq.ints.row(r).data();
    if (asym)
      for (std::size_t k = 0; k < n; ++k) rowsum[r] += xr[k];
    for (std::size_t c = 0; c < j_dim; ++c) {
      const std::int8_t* wc = packed.data() + c * n;
      std::int32_t acc = 0;
      if (fits) {
        for (std::size_t k = 0; k < n; ++k)
          acc += static_cast<std::int32_t>(xr[k]) * static_cast<std::int32_t>(wc[k]);
      } else {
        for (std::size_t k = 0; k < n; ++k) {
          const std::int32_t prod = static_cast<std::int32_t>(xr[k]) * wc[k];
          if (__builtin_add_overflow(acc, prod, &acc))
            throw OverflowError("gemm: int32 accumulator overflow");
        }
      }
      if (asym) {
        const i64 corrected = static_cast<i64>(acc) - static_cast<i64>(wzero[c]) * rowsum[r];
        if (corrected > std::numeric_limits<std::int32_t>::max() ||
            corrected < std::numeric_limits<std::int32_t>::min())
          throw OverflowError("gemm: int32 overflow in zero-point correction");
        acc = static_cast<std::int32_t>(corrected);
      }
      out.acc[r * j_dim + c] = acc;
    }
  }
  const auto ijn = static_cast<std::uint64_t>(i_dim) * n * j_dim;
  out.count.int_mults = ijn;
  out.count.int_adds = ijn;
  if (asym) {
    out.count.zp_mults = static_cast<std::uint64_t>(i_dim) * j_dim;
    out.count.int_adds += static_cast<std::uint64_t>(i_dim) * n + out.count.zp_mults;
  }
  return out;
}

}  // namespace

std::string_view to_string(GemmVariant v) {
  switch (v) {
    case GemmVariant::kTensorTensor:
      return "tensor_tensor";
    case GemmVariant::kTokenChannel:
      return "token_channel";
    case GemmVariant::kChannelChannelNaive:
      return "channel_naive";
    case GemmVariant::kChannelChannelFolded:
      return "channel_folded";
  }
  return "?";
}

GemmVariant parse_variant(std::string_view s) {
  for (auto v : {GemmVariant::kTensorTensor, GemmVariant::kTokenChannel,
                 GemmVariant::kChannelChannelNaive, GemmVariant::kChannelChannelFolded})
    if (s == to_string(v)) return v;
  throw ContractError("unknown gemm variant '" + std::string(s) + "'");
}

nlohmann::json to_json(const OpCount& c) {
  return {{"int_mults", c.int_mults},
          {"int_adds", c.int_adds},
          {"scale_mults", c.scale_mults},
          {"zp_mults", c.zp_mults}};
}

GemmResult gemm_tensor_tensor(const QTensor& xq, const QTensor& wq) {
  check_shapes(xq, wq);
  require(xq.scheme.axis == Axis::kPerTensor, "tensor_tensor: activations must be per-tensor");
  require(wq.scheme.axis == Axis::kPerTensor && wq.scheme.symmetric(),
          "tensor_tensor: weights must be per-tensor symmetric");
  auto red = integer_reduce(xq, wq);
  const std::size_t i_dim = xq.rows(), j_dim = wq.cols();
  const double s = xq.scales[0] * wq.scales[0];
  GemmResult res{MatF(i_dim, j_dim), red.count};
  for (std::size_t r = 0; r < i_dim; ++r)
    for (std::size_t c = 0; c < j_dim; ++c)
      res.y(r, c) = s * static_cast<double>(red.acc[r * j_dim + c]);
  res.count.scale_mults = static_cast<std::uint64_t>(i_dim) * j_dim;
  return res;
}

GemmResult gemm_token_channel(const QTensor& xq, const QTensor& wq) {
  check_shapes(xq, wq);
  require(xq.scheme.axis == Axis::kPerToken, "token_channel: activations must be per-token");
  require(wq.scheme.axis == Axis::kPerChannel, "token_channel: weights must be per-channel");
  auto red = integer_reduce(xq, wq);
  const std::size_t i_dim = xq.rows(), j_dim = wq.cols();
  GemmResult res{MatF(i_dim, j_dim), red.count};
  for (std::size_t r = 0; r < i_dim; ++r)
    for (std::size_t c = 0; c < j_dim; ++c)
      res.y(r, c) = (xq.scales[r] * wq.scales[c]) * static_cast<double>(red.acc[r * j_dim + c]);
  res.count.scale_mults = 2 * static_cast<std::uint64_t>(i_dim) * j_dim;
  return res;
}

GemmResult gemm_channel_naive(const QTensor& xq, const QTensor& wq) {
  check_shapes(xq, wq);
  require(xq.scheme.axis == Axis::kPerChannel, "channel_naive: activations must be per-channel");
  require(wq.scheme.axis == Axis::kPerChannel, "channel_naive: weights must be per-channel");
  const std::size_t i_dim = xq.rows(), n = xq.cols(), j_dim = wq.cols();
  const auto packed = pack_columns(wq);
  const bool asym = !wq.scheme.symmetric();
  const std::span<const double> sx = xq.scales;

  GemmResult res{MatF(i_dim, j_dim), {}};
  for (std::size_t r = 0; r < i_dim; ++r) {
    const std::int8_t* xr = xq.ints.row(r).data();
    for (std::size_t c = 0; c < j_dim; ++c) {
      const std::int8_t* wc = packed.data() + c * n;
      const std::int32_t wz = asym ? wq.storage_zero(c) : 0;
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const std::int32_t prod = static_cast<std::int32_t>(xr[k]) * (wc[k] - wz);
        acc += sx[k] * static_cast<double>(prod);
      }
      res.y(r, c) = wq.scales[c] * acc;
    }
  }
  const auto ij = static_cast<std::uint64_t>(i_dim) * j_dim;
  res.count.int_mults = ij * n;
  res.count.int_adds = asym ? 2 * ij * n : ij * n;
  res.count.scale_mults = ij * n + ij;
  return res;
}

GemmResult gemm_channel_folded(const QTensor& xq, const QTensor& wsq) {
  check_shapes(xq, wsq);
  require(xq.scheme.axis == Axis::kPerChannel, "channel_folded: activations must be per-channel");
  require(wsq.scheme.axis == Axis::kPerChannel, "channel_folded: weights must be per-channel");
  auto red = integer_reduce(xq, wsq);
  const std::size_t i_dim = xq.rows(), j_dim = wsq.cols();
  GemmResult res{MatF(i_dim, j_dim), red.count};
  for (std::size_t r = 0; r < i_dim; ++r)
    for (std::size_t c = 0; c < j_dim; ++c)
      res.y(r, c) = wsq.scales[c] * static_cast<double>(red.acc[r * j_dim + c]);
  res.count.scale_mults = static_cast<std::uint64_t>(i_dim) * j_dim;
  return res;
}

GemmResult gemm(GemmVariant v, const QTensor& xq, const QTensor& wq) {
  switch (v) {
    case GemmVariant::kTensorTensor:
      return gemm_tensor_tensor(xq, wq);
    case GemmVariant::kTokenChannel:
      return gemm_token_channel(xq, wq);
    case GemmVariant::kChannelChannelNaive:
      return gemm_channel_naive(xq, wq);
    case GemmVariant::kChannelChannelFolded:
      return gemm_channel_folded(xq, wq);
  }
  throw ContractError("gemm: bad variant");
}

OpCount expected_op_count(GemmVariant v, std::size_t i, std::size_t n, std::size_t j,
                          bool asymmetric_weights) {
  const auto ij = static_cast<std::uint64_t>(i) * j;
  const std::uint64_t ijn = ij * n;
  OpCount c;
  c.int_mults = ijn;
  c.int_adds = ijn;
  if (v == GemmVariant::kChannelChannelNaive) {
    c.scale_mults = ijn + ij;
    if (asymmetric_weights) c.int_adds += ijn;
    return c;
  }
  c.scale_mults = v == GemmVariant::kTokenChannel ? 2 * ij : ij;
  if (asymmetric_weights) {
    c.zp_mults = ij;
    c.int_adds += static_cast<std::uint64_t>(i) * n + ij;
  }
  return c;
}

}  // namespace otune
