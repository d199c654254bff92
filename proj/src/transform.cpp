#include "outliertune/transform.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace otune {

namespace {

OpCount& operator+=(OpCount& a, const OpCount& b) {
  a.int_mults += b.int_mults;
  a.int_adds += b.int_adds;
  a.scale_mults += b.scale_mults;
  a.zp_mults += b.zp_mults;
  return a;
}

void require_populated(const CalibStats& s, std::size_t channels, const char* name) {
  if (s.empty()) throw DomainError(std::string(name) + ": calibration stats are empty");
  if (s.channels() != channels)
    throw DimensionError(std::string(name) + ": stats cover " + std::to_string(s.channels()) +
                         " channels, layer expects " + std::to_string(channels));
}

void check_schemes(const QScheme& wscheme, const QScheme& ascheme) {
  wscheme.validate();
  ascheme.validate();
  if (wscheme.axis != Axis::kPerChannel)
    throw ContractError("transform: weight scheme must be per-channel");
  if (ascheme.axis != Axis::kPerChannel || !ascheme.symmetric())
    throw ContractError("transform: activation scheme must be per-channel symmetric");
}

LayerNorm shift_beta(LayerNorm ln, std::span<const double> delta) {
  for (std::size_t c = 0; c < ln.beta.size(); ++c) ln.beta[c] += delta[c];
  return ln;
}

}  // namespace

std::vector<double> compute_symmetrization(const CalibStats& stats) {
  if (stats.empty()) throw DomainError("compute_symmetrization: stats are empty");
  std::vector<double> z(stats.channels());
  for (std::size_t c = 0; c < z.size(); ++c) z[c] = (stats.max()[c] + stats.min()[c]) / 2.0;
  return z;
}

MatF fold_weights(const MatF& w, std::span<const double> sx) {
  if (sx.size() != w.cols())
    throw DimensionError("fold_weights: " + std::to_string(sx.size()) + " scales for " +
                         std::to_string(w.cols()) + " input channels");
  for (double s : sx)
    if (!(s > 0.0)) throw DomainError("fold_weights: scales must be positive");
  MatF ws = w;
  for (std::size_t r = 0; r < ws.rows(); ++r) {
    auto row = ws.row(r);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] *= sx[k];
  }
  return ws;
}

SymmetrizedLayer symmetrize_layer(const LinearLayer& layer, std::span<const double> z) {
  layer.validate();
  if (z.size() != layer.in_features())
    throw DimensionError("symmetrize_layer: z length != input features");
  SymmetrizedLayer out{layer, std::vector<double>(z.size())};
  for (std::size_t r = 0; r < layer.out_features(); ++r) {
    const auto w = layer.weight.row(r);
    double acc = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) acc += z[k] * w[k];
    out.layer.bias[r] = acc + layer.bias[r];
  }
  for (std::size_t k = 0; k < z.size(); ++k) out.ln_bias_delta[k] = -z[k];
  return out;
}

LinearLayer correct_residual(const LinearLayer& layer, std::span<const double> z) {
  layer.validate();
  if (z.size() != layer.out_features())
    throw DimensionError("correct_residual: z length != output features");
  LinearLayer out = layer;
  for (std::size_t r = 0; r < z.size(); ++r) out.bias[r] += z[r];
  return out;
}

std::vector<double> static_activation_scales(const CalibStats& stats, std::span<const double> z,
                                             int bits) {
  if (z.size() != stats.channels()) throw DimensionError("static scales: z length mismatch");
  const QScheme sym{bits, Symmetry::kSymmetric, Axis::kPerChannel};
  std::vector<double> s(z.size());
  for (std::size_t c = 0; c < s.size(); ++c)
    s[c] = compute_scale(stats.min()[c] - z[c], stats.max()[c] - z[c], sym).scale;
  return s;
}

QTensor quantize_weight(const MatF& w, const QScheme& wscheme) {
  QScheme s = wscheme;
  s.axis = Axis::kPerChannel;
  return quantize(transpose(w), s);
}

void FoldedLinear::validate() const {
  if (wsq.rows() != sx.size() || sym_z.size() != sx.size() || ws.cols() != sx.size())
    throw DimensionError("FoldedLinear: input width disagrees across ws/wsq/sx/z");
  if (bias.size() != ws.rows() || wsq.cols() != ws.rows())
    throw DimensionError("FoldedLinear: output width disagrees");
  wsq.validate();
}

QTensor FoldedLinear::quantize_input(const MatF& xhat) const {
  return quantize_with_params(xhat, act_scheme, sx, std::vector<std::int32_t>(sx.size(), 0));
}

MatF FoldedLinear::forward_bypass(const MatF& xhat) const {
  if (xhat.cols() != sx.size()) throw DimensionError("FoldedLinear: input width mismatch");
  MatF scaled = xhat;
  for (std::size_t r = 0; r < scaled.rows(); ++r) {
    auto row = scaled.row(r);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] /= sx[k];
  }
  MatF y = matmul_abt(scaled, ws);
  add_row_vector(y, bias);
  return y;
}

MatF FoldedLinear::forward_quantized(const MatF& xhat, OpCount* count) const {
  auto res = gemm_channel_folded(quantize_input(xhat), wsq);
  if (count != nullptr) *count += res.count;
  add_row_vector(res.y, bias);
  return std::move(res.y);
}

FoldedLinear make_folded_linear(const LinearLayer& layer, std::span<const double> z,
                                std::vector<double> sx, const QScheme& wscheme,
                                const QScheme& ascheme) {
  check_schemes(wscheme, ascheme);
  auto sym = symmetrize_layer(layer, z);

  // Independent recomputation of b' = z W^T + b, accumulated in reverse order.
  for (std::size_t r = 0; r < layer.out_features(); ++r) {
    double acc = layer.bias[r];
    double mag = std::abs(layer.bias[r]);
    for (std::size_t k = z.size(); k-- > 0;) {
      acc += z[k] * layer.weight(r, k);
      mag += std::abs(z[k] * layer.weight(r, k));
    }
    if (std::abs(acc - sym.layer.bias[r]) > 1e-12 * std::max(mag, 1.0))
      throw ContractError("FoldedLinear: adjusted bias disagrees with recomputation");
  }

  FoldedLinear f;
  f.ws = fold_weights(layer.weight, sx);
  f.wsq = quantize_weight(f.ws, wscheme);
  f.bias = std::move(sym.layer.bias);
  f.sx = std::move(sx);
  f.sym_z.assign(z.begin(), z.end());
  f.act_scheme = ascheme;
  f.validate();
  return f;
}

MatF TokenChannelLinear::forward_bypass(const MatF& x) const { return layer.apply(x); }

MatF TokenChannelLinear::forward_quantized(const MatF& x, OpCount* count) const {
  auto res = gemm_token_channel(quantize(x, act_scheme), wq);
  if (count != nullptr) *count += res.count;
  add_row_vector(res.y, layer.bias);
  return std::move(res.y);
}

TokenChannelLinear make_token_channel_linear(const LinearLayer& layer, const QScheme& wscheme,
                                             int act_bits) {
  layer.validate();
  return {layer, quantize_weight(layer.weight, wscheme),
          QScheme{act_bits, Symmetry::kSymmetric, Axis::kPerToken}};
}

BlockOps TransformedBlock::ops(ExecMode mode, OpCount* count) const {
  BlockOps o;
  o.ln1 = [this](const MatF& x) { return ln1.apply(x); };
  o.ln2 = [this](const MatF& x) { return ln2.apply(x); };
  if (mode == ExecMode::kBypass) {
    o.qkv = [this](const MatF& x) { return qkv.forward_bypass(x); };
    o.fc1 = [this](const MatF& x) { return fc1.forward_bypass(x); };
    o.out = [this](const MatF& x) { return out.forward_bypass(x); };
    o.fc2 = [this](const MatF& x) { return fc2.forward_bypass(x); };
  } else {
    o.qkv = [this, count](const MatF& x) { return qkv.forward_quantized(x, count); };
    o.fc1 = [this, count](const MatF& x) { return fc1.forward_quantized(x, count); };
    o.out = [this, count](const MatF& x) { return out.forward_quantized(x, count); };
    o.fc2 = [this, count](const MatF& x) { return fc2.forward_quantized(x, count); };
  }
  o.heads = dims.heads;
  o.residual = residual;
  return o;
}

MatF TransformedBlock::forward(const MatF& x, ExecMode mode, OpCount* count) const {
  return run_block(ops(mode, count), x);
}

TransformedBlock transform_block(const BlockModel& model, const CalibStats& stats_ln1,
                                 const CalibStats& stats_ln2, const QScheme& wscheme,
                                 const QScheme& ascheme, bool symmetrize) {
  model.validate();
  check_schemes(wscheme, ascheme);
  const std::size_t n = model.dims.hidden;
  require_populated(stats_ln1, n, "ln1");
  require_populated(stats_ln2, n, "ln2");

  const auto z1 = symmetrize ? compute_symmetrization(stats_ln1) : std::vector<double>(n, 0.0);
  const auto z2 = symmetrize ? compute_symmetrization(stats_ln2) : std::vector<double>(n, 0.0);

  TransformedBlock t;
  t.dims = model.dims;
  t.residual = model.residual;
  t.options = {wscheme, ascheme, symmetrize};

  std::vector<double> neg1(n), neg2(n);
  for (std::size_t c = 0; c < n; ++c) {
    neg1[c] = -z1[c];
    neg2[c] = -z2[c];
  }
  t.ln1 = shift_beta(model.ln1, neg1);
  t.ln2 = shift_beta(model.ln2, neg2);

  t.qkv = make_folded_linear(model.qkv, z1, static_activation_scales(stats_ln1, z1, ascheme.bits),
                             wscheme, ascheme);
  t.fc1 = make_folded_linear(model.fc1, z2, static_activation_scales(stats_ln2, z2, ascheme.bits),
                             wscheme, ascheme);

  // With a post-norm tap the residual carries X_hat = X - z; out/fc2 add z back.
  const bool post = model.residual == ResidualTap::kPostNorm;
  const std::vector<double> zero(n, 0.0);
  t.out = make_token_channel_linear(correct_residual(model.out, post ? z1 : zero), wscheme,
                                    ascheme.bits);
  t.fc2 = make_token_channel_linear(correct_residual(model.fc2, post ? z2 : zero), wscheme,
                                    ascheme.bits);
  return t;
}

MatF ChannelNaiveLinear::forward_quantized(const MatF& xhat, OpCount* count) const {
  auto xq = quantize_with_params(xhat, act_scheme, sx, std::vector<std::int32_t>(sx.size(), 0));
  auto res = gemm_channel_naive(xq, wq);
  if (count != nullptr) *count += res.count;
  add_row_vector(res.y, layer.bias);
  return std::move(res.y);
}

BlockOps ChannelNaiveBlock::ops(OpCount* count) const {
  BlockOps o;
  o.ln1 = [this](const MatF& x) { return ln1.apply(x); };
  o.ln2 = [this](const MatF& x) { return ln2.apply(x); };
  o.qkv = [this, count](const MatF& x) { return qkv.forward_quantized(x, count); };
  o.fc1 = [this, count](const MatF& x) { return fc1.forward_quantized(x, count); };
  o.out = [this, count](const MatF& x) { return out.forward_quantized(x, count); };
  o.fc2 = [this, count](const MatF& x) { return fc2.forward_quantized(x, count); };
  o.heads = dims.heads;
  o.residual = residual;
  return o;
}

MatF ChannelNaiveBlock::forward(const MatF& x, OpCount* count) const {
  return run_block(ops(count), x);
}

ChannelNaiveBlock build_channel_naive(const BlockModel& model, const CalibStats& stats_ln1,
                                      const CalibStats& stats_ln2, const QScheme& wscheme,
                                      const QScheme& ascheme, bool symmetrize) {
  model.validate();
  check_schemes(wscheme, ascheme);
  const std::size_t n = model.dims.hidden;
  require_populated(stats_ln1, n, "ln1");
  require_populated(stats_ln2, n, "ln2");
  const auto z1 = symmetrize ? compute_symmetrization(stats_ln1) : std::vector<double>(n, 0.0);
  const auto z2 = symmetrize ? compute_symmetrization(stats_ln2) : std::vector<double>(n, 0.0);

  auto naive = [&](const LinearLayer& layer, const std::vector<double>& z,
                   const CalibStats& stats) {
    auto sym = symmetrize_layer(layer, z);
    return ChannelNaiveLinear{sym.layer, quantize_weight(layer.weight, wscheme),
                              static_activation_scales(stats, z, ascheme.bits), z, ascheme};
  };

  ChannelNaiveBlock b;
  b.dims = model.dims;
  b.residual = model.residual;
  std::vector<double> neg1(n), neg2(n);
  for (std::size_t c = 0; c < n; ++c) {
    neg1[c] = -z1[c];
    neg2[c] = -z2[c];
  }
  b.ln1 = shift_beta(model.ln1, neg1);
  b.ln2 = shift_beta(model.ln2, neg2);
  b.qkv = naive(model.qkv, z1, stats_ln1);
  b.fc1 = naive(model.fc1, z2, stats_ln2);
  const bool post = model.residual == ResidualTap::kPostNorm;
  const std::vector<double> zero(n, 0.0);
  b.out = make_token_channel_linear(correct_residual(model.out, post ? z1 : zero), wscheme,
                                    ascheme.bits);
  b.fc2 = make_token_channel_linear(correct_residual(model.fc2, post ? z2 : zero), wscheme,
                                    ascheme.bits);
  return b;
}

}  // namespace otune
