#pragma once

#include <span>
#include <vector>

#include "outliertune/block.hpp"
#include "outliertune/qgemm.hpp"
#include "outliertune/quant.hpp"

namespace otune {

// z_k = (max_k + min_k) / 2 per channel. Throws DomainError on empty stats.
std::vector<double> compute_symmetrization(const CalibStats& stats);

// W_s[r][k] = W[r][k] * sx[k]; W is out x in, sx has one entry per input channel.
MatF fold_weights(const MatF& w, std::span<const double> sx);

struct SymmetrizedLayer {
  LinearLayer layer;                  // bias b' = z W^T + b
  std::vector<double> ln_bias_delta;  // -z, added to the producing LayerNorm's beta
};

// Absorbs the shift X = X_hat + z into the bias so that X_hat W^T + b' == X W^T + b.
SymmetrizedLayer symmetrize_layer(const LinearLayer& layer, std::span<const double> z);

// b += z on a layer whose output is added to a residual stream that lost z.
LinearLayer correct_residual(const LinearLayer& layer, std::span<const double> z);

// s_k = max(|min_k - z_k|, |max_k - z_k|) / (2^(b-1) - 1): static per-channel symmetric
// scales of the shifted activations.
std::vector<double> static_activation_scales(const CalibStats& stats, std::span<const double> z,
                                             int bits);

enum class ExecMode {
  kBypass,    // every linear runs in f64 with unquantized (but transformed) weights
  kQuantized  // integer GEMMs
};

// A LayerNorm-fed linear layer after symmetrization and scale folding.
struct FoldedLinear {
  MatF ws;                   // W (.) s^X, out x in
  QTensor wsq;               // per-output-channel quantization of ws^T (in x out)
  std::vector<double> bias;  // z W^T + b, kept in f64
  std::vector<double> sx;    // static activation scales
  std::vector<double> sym_z;
  QScheme act_scheme;  // per-channel symmetric

  void validate() const;
  QTensor quantize_input(const MatF& xhat) const;
  // (X_hat (/) s^X) W_s^T + b'
  MatF forward_bypass(const MatF& xhat) const;
  MatF forward_quantized(const MatF& xhat, OpCount* count = nullptr) const;
};

// Builds a FoldedLinear and checks b' against an independent f64 recomputation.
FoldedLinear make_folded_linear(const LinearLayer& layer, std::span<const double> z,
                                std::vector<double> sx, const QScheme& wscheme,
                                const QScheme& ascheme);

// A linear layer with dynamic per-token activations and per-channel weights.
struct TokenChannelLinear {
  LinearLayer layer;  // f64 weights and (residual-corrected) bias
  QTensor wq;         // per-output-channel quantization of W^T
  QScheme act_scheme;  // per-token symmetric

  MatF forward_bypass(const MatF& x) const;
  MatF forward_quantized(const MatF& x, OpCount* count = nullptr) const;
};

TokenChannelLinear make_token_channel_linear(const LinearLayer& layer, const QScheme& wscheme,
                                             int act_bits);

// Quantizes W^T per output channel under wscheme's bits and symmetry.
QTensor quantize_weight(const MatF& w, const QScheme& wscheme);

struct TransformOptions {
  QScheme weight{8, Symmetry::kSymmetric, Axis::kPerChannel};
  QScheme activation{8, Symmetry::kSymmetric, Axis::kPerChannel};
  bool symmetrize = true;
};

struct TransformedBlock {
  BlockDims dims;
  LayerNorm ln1, ln2;  // beta shifted by -z
  FoldedLinear qkv, fc1;
  TokenChannelLinear out, fc2;  // bias += z when the residual is tapped after LayerNorm
  ResidualTap residual = ResidualTap::kPreNorm;
  TransformOptions options;

  // The returned ops reference *this and count (if given).
  BlockOps ops(ExecMode mode, OpCount* count = nullptr) const;
  MatF forward(const MatF& x, ExecMode mode, OpCount* count = nullptr) const;
};

// stats_ln1/stats_ln2 are min/max of the raw LayerNorm outputs. The weight scheme must be
// per-channel, the activation scheme per-channel symmetric (ContractError otherwise).
TransformedBlock transform_block(const BlockModel& model, const CalibStats& stats_ln1,
                                 const CalibStats& stats_ln2, const QScheme& wscheme,
                                 const QScheme& ascheme, bool symmetrize = true);

// Same pipeline without the fold: per-channel activations whose scales are applied
// inside the reduction (channel_naive kernel) against per-channel quantized W.
struct ChannelNaiveLinear {
  LinearLayer layer;  // W and symmetrized bias
  QTensor wq;
  std::vector<double> sx;
  std::vector<double> sym_z;
  QScheme act_scheme;

  MatF forward_quantized(const MatF& xhat, OpCount* count = nullptr) const;
};

struct ChannelNaiveBlock {
  BlockDims dims;
  LayerNorm ln1, ln2;
  ChannelNaiveLinear qkv, fc1;
  TokenChannelLinear out, fc2;
  ResidualTap residual = ResidualTap::kPreNorm;

  BlockOps ops(OpCount* count = nullptr) const;
  MatF forward(const MatF& x, OpCount* count = nullptr) const;
};

ChannelNaiveBlock build_channel_naive(const BlockModel& model, const CalibStats& stats_ln1,
                                      const CalibStats& stats_ln2, const QScheme& wscheme,
                                      const QScheme& ascheme, bool symmetrize = true);

}  // namespace otune
