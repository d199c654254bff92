#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

#include "json.hpp"
#include "outliertune/quant.hpp"
#include "outliertune/tensor.hpp"

namespace otune {

// Quantized matrix multiply Y (i x j) = X (i x n) * W (n x j), by where the
// dequantization scales are applied.
enum class GemmVariant {
  kTensorTensor,         // one scalar scale per operand, applied outside the reduction
  kTokenChannel,         // per-row activation scale x per-column weight scale, outside
  kChannelChannelNaive,  // per-channel activation scale multiplied inside the k loop
  kChannelChannelFolded  // activation scales pre-folded into W; pure integer reduction
};

std::string_view to_string(GemmVariant v);
GemmVariant parse_variant(std::string_view s);

// Counted arithmetic. scale_mults are floating multiplies applied to or inside the
// accumulation; zp_mults are the weight zero-point corrections (asymmetric weights).
struct OpCount {
  std::uint64_t int_mults = 0;
  std::uint64_t int_adds = 0;
  std::uint64_t scale_mults = 0;
  std::uint64_t zp_mults = 0;

  bool operator==(const OpCount&) const = default;
};

nlohmann::json to_json(const OpCount& c);

struct GemmResult {
  MatF y;
  OpCount count;
};

// Inner dimension bound; with |codes| <= 127 the int32 accumulator cannot overflow.
inline constexpr std::size_t kMaxInnerDim = 65536;

// Scheme requirements (activations are always symmetric):
//   tensor_tensor:  x per-tensor,  w per-tensor symmetric
//   token_channel:  x per-token,   w per-channel (columns)
//   channel_naive:  x per-channel, w per-channel; x's scales are applied inside the loop
//   channel_folded: x per-channel, w per-channel of the folded weight; x's scales unused
// Violations throw ContractError; int32 overflow throws OverflowError.
GemmResult gemm_tensor_tensor(const QTensor& xq, const QTensor& wq);
GemmResult gemm_token_channel(const QTensor& xq, const QTensor& wq);
GemmResult gemm_channel_naive(const QTensor& xq, const QTensor& wq);
GemmResult gemm_channel_folded(const QTensor& xq, const QTensor& wsq);

GemmResult gemm(GemmVariant v, const QTensor& xq, const QTensor& wq);

// Closed-form counts for shape (i, n, j).
OpCount expected_op_count(GemmVariant v, std::size_t i, std::size_t n, std::size_t j,
                          bool asymmetric_weights);

}  // namespace otune
