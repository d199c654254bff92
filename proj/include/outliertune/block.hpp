#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "outliertune/tensor.hpp"

namespace otune {

struct LayerNorm {
  std::vector<double> gamma;
  std::vector<double> beta;
  double eps = 1e-5;

  // Row-wise normalization with population variance.
  MatF apply(const MatF& x) const;
};

// How a linear layer's activations are quantized in the transformed model.
enum class QuantMode {
  kFoldedPerChannel,  // fed by a LayerNorm: static per-channel, scales folded into W
  kTokenChannel       // dynamic per-token activations, per-channel weights
};

struct LinearLayer {
  MatF weight;  // out x in
  std::vector<double> bias;
  QuantMode mode = QuantMode::kTokenChannel;

  std::size_t in_features() const noexcept { return weight.cols(); }
  std::size_t out_features() const noexcept { return weight.rows(); }

  void validate() const;
  // x W^T + b
  MatF apply(const MatF& x) const;
};

// Where the residual branch is tapped: the block input (pre-LN architecture), or the
// LayerNorm output.
enum class ResidualTap { kPreNorm, kPostNorm };

std::string_view to_string(ResidualTap t);
ResidualTap parse_residual_tap(std::string_view s);

struct BlockDims {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;

  bool operator==(const BlockDims&) const = default;
};

// LN1 -> qkv -> causal MHA -> out -> +residual -> LN2 -> fc1 -> ReLU -> fc2 -> +residual.
struct BlockModel {
  BlockDims dims;
  LayerNorm ln1, ln2;
  LinearLayer qkv, out, fc1, fc2;
  ResidualTap residual = ResidualTap::kPreNorm;

  // Throws DimensionError unless every layer chains: qkv n->3n, out n->n, fc1 n->ffn,
  // fc2 ffn->n, heads divides n.
  void validate() const;
};

// Weights ~ N(0, 2/hidden), biases ~ N(0, 0.02^2), gamma = 1, beta = 0.
BlockModel random_block(const BlockDims& dims, std::uint64_t seed,
                        ResidualTap residual = ResidualTap::kPreNorm);

// Intermediate activations of one forward pass.
struct BlockTrace {
  MatF ln1_out;  // input to qkv
  MatF attn;     // input to out
  MatF ln2_out;  // input to fc1
  MatF hidden;   // ReLU output, input to fc2
  MatF output;
};

using MatFn = std::function<MatF(const MatF&)>;

// The block's topology with every stage supplied by the caller. The FP model, the
// transformed model and the quantized baselines all run through this.
struct BlockOps {
  MatFn ln1, ln2, qkv, out, fc1, fc2;
  std::size_t heads = 1;
  ResidualTap residual = ResidualTap::kPreNorm;
};

MatF run_block(const BlockOps& ops, const MatF& x, BlockTrace* trace = nullptr);

BlockOps fp_ops(const BlockModel& m);

// Rows of x are the tokens of one causal sequence.
MatF forward(const BlockModel& m, const MatF& x);
BlockTrace forward_trace(const BlockModel& m, const MatF& x);

// Causal multi-head attention over packed [q | k | v] columns.
MatF causal_attention(const MatF& qkv, std::size_t heads);

MatF relu(MatF x);

}  // namespace otune
