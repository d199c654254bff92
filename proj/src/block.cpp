#include "outliertune/block.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "outliertune/rng.hpp"

namespace otune {

MatF LayerNorm::apply(const MatF& x) const {
  if (gamma.size() != x.cols() || beta.size() != x.cols())
    throw DimensionError("LayerNorm: width mismatch");
  MatF y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    auto out = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c)
      out[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
  }
  return y;
}

void LinearLayer::validate() const {
  if (bias.size() != weight.rows())
    throw DimensionError("LinearLayer: bias length " + std::to_string(bias.size()) +
                         " != out features " + std::to_string(weight.rows()));
}

MatF LinearLayer::apply(const MatF& x) const {
  MatF y = matmul_abt(x, weight);
  add_row_vector(y, bias);
  return y;
}

std::string_view to_string(ResidualTap t) {
  return t == ResidualTap::kPreNorm ? "pre_norm" : "post_norm";
}

ResidualTap parse_residual_tap(std::string_view s) {
  if (s == "pre_norm" || s == "pre") return ResidualTap::kPreNorm;
  if (s == "post_norm" || s == "post") return ResidualTap::kPostNorm;
  throw ContractError("unknown residual tap '" + std::string(s) + "'");
}

void BlockModel::validate() const {
  const std::size_t n = dims.hidden;
  auto expect = [](const LinearLayer& l, std::size_t out, std::size_t in, const char* name) {
    l.validate();
    if (l.out_features() != out || l.in_features() != in)
      throw DimensionError(std::string(name) + ": expected " + std::to_string(out) + "x" +
                           std::to_string(in) + ", got " + std::to_string(l.out_features()) +
                           "x" + std::to_string(l.in_features()));
  };
  if (dims.heads == 0 || n % dims.heads != 0)
    throw DimensionError("heads must divide the hidden size");
  for (const LayerNorm* ln : {&ln1, &ln2})
    if (ln->gamma.size() != n || ln->beta.size() != n)
      throw DimensionError("LayerNorm width != hidden");
  expect(qkv, 3 * n, n, "qkv");
  expect(out, n, n, "out");
  expect(fc1, dims.ffn, n, "fc1");
  expect(fc2, n, dims.ffn, "fc2");
}

BlockModel random_block(const BlockDims& dims, std::uint64_t seed, ResidualTap residual) {
  auto rng = make_rng(seed, 0x6d6f64656cULL);
  std::normal_distribution<double> wdist(0.0, std::sqrt(2.0 / static_cast<double>(dims.hidden)));
  std::normal_distribution<double> bdist(0.0, 0.02);
  auto linear = [&](std::size_t out, std::size_t in, QuantMode mode) {
    std::vector<double> w(out * in);
    for (double& v : w) v = wdist(rng);
    std::vector<double> b(out);
    for (double& v : b) v = bdist(rng);
    return LinearLayer{MatF(out, in, std::move(w)), std::move(b), mode};
  };
  BlockModel m;
  m.dims = dims;
  m.residual = residual;
  const std::size_t n = dims.hidden;
  m.ln1 = LayerNorm{std::vector<double>(n, 1.0), std::vector<double>(n, 0.0), 1e-5};
  m.ln2 = m.ln1;
  m.qkv = linear(3 * n, n, QuantMode::kFoldedPerChannel);
  m.out = linear(n, n, QuantMode::kTokenChannel);
  m.fc1 = linear(dims.ffn, n, QuantMode::kFoldedPerChannel);
  m.fc2 = linear(n, dims.ffn, QuantMode::kTokenChannel);
  m.validate();
  return m;
}

MatF causal_attention(const MatF& qkv, std::size_t heads) {
  if (qkv.cols() % 3 != 0) throw DimensionError("attention: qkv width not divisible by 3");
  const std::size_t n = qkv.cols() / 3;
  if (heads == 0 || n % heads != 0) throw DimensionError("attention: heads must divide width");
  const std::size_t d = n / heads;
  const std::size_t t = qkv.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  MatF out(t, n);
  std::vector<double> logits(t);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t q0 = h * d, k0 = n + h * d, v0 = 2 * n + h * d;
    for (std::size_t i = 0; i < t; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += qkv(i, q0 + c) * qkv(j, k0 + c);
        logits[j] = acc * scale;
        mx = std::max(mx, logits[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        denom += logits[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = logits[j] / denom;
        for (std::size_t c = 0; c < d; ++c) out(i, q0 + c) += p * qkv(j, v0 + c);
      }
    }
  }
  return out;
}

MatF relu(MatF x) {
  for (double& v : x.data()) v = std::max(v, 0.0);
  return x;
}

namespace {

void add_inplace(MatF& a, const MatF& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("residual add: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

}  // namespace

MatF run_block(const BlockOps& ops, const MatF& x, BlockTrace* trace) {
  MatF h1 = ops.ln1(x);
  MatF attn = causal_attention(ops.qkv(h1), ops.heads);
  MatF x2 = ops.out(attn);
  add_inplace(x2, ops.residual == ResidualTap::kPreNorm ? x : h1);
  MatF h2 = ops.ln2(x2);
  MatF hidden = relu(ops.fc1(h2));
  MatF y = ops.fc2(hidden);
  add_inplace(y, ops.residual == ResidualTap::kPreNorm ? x2 : h2);
  if (trace != nullptr) {
    trace->ln1_out = std::move(h1);
    trace->attn = std::move(attn);
    trace->ln2_out = std::move(h2);
    trace->hidden = std::move(hidden);
    trace->output = y;
  }
  return y;
}

BlockOps fp_ops(const BlockModel& m) {
  BlockOps ops;
  ops.ln1 = [&m](const MatF& x) { return m.ln1.apply(x); };
  ops.ln2 = [&m](const MatF& x) { return m.ln2.apply(x); };
  ops.qkv = [&m](const MatF& x) { return m.qkv.apply(x); };
  ops.out = [&m](const MatF& x) { return m.out.apply(x); };
  ops.fc1 = [&m](const MatF& x) { return m.fc1.apply(x); };
  ops.fc2 = [&m](const MatF& x) { return m.fc2.apply(x); };
  ops.heads = m.dims.heads;
  ops.residual = m.residual;
  return ops;
}

MatF forward(const BlockModel& m, const MatF& x) { return run_block(fp_ops(m), x); }

BlockTrace forward_trace(const BlockModel& m, const MatF& x) {
  BlockTrace t;
  run_block(fp_ops(m), x, &t);
  return t;
}

}  // namespace otune
