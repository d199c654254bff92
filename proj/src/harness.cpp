#include "outliertune/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <map>
#include <cmath>
#include <optional>
#include <random>
#include <set>

#include "outliertune/errors.hpp"
#include "outliertune/rng.hpp"

namespace otune {

namespace {

constexpr std::uint64_t kInputStream = 0x696e707574ULL;  // "input"
constexpr std::uint64_t kGemmStream = 0x67656d6dULL;     // "gemm"

std::uint64_t elapsed_ns(std::chrono::steady_clock::time_point t0) {
  const auto d = std::chrono::steady_clock::now() - t0;
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(d).count());
}

MatF shift_columns(const MatF& x, std::span<const double> z) {
  MatF out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= z[c];
  }
  return out;
}

void subtract_row_vector(MatF& x, std::span<const double> z) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= z[c];
  }
}

// Applies f to consecutive seq_len-row chunks and stacks the results.
template <typename F>
MatF chunked(const MatF& x, std::size_t seq_len, F&& f) {
  if (seq_len == 0) throw ContractError("seq_len must be positive");
  std::vector<MatF> parts;
  for (std::size_t r = 0; r < x.rows(); r += seq_len)
    parts.push_back(f(slice_rows(x, r, std::min(seq_len, x.rows() - r))));
  return vstack(parts);
}

}  // namespace

void OutlierSpec::validate() const {
  std::set<std::size_t> seen;
  for (auto k : outlier_indices) {
    if (k >= n_channels) throw ContractError("outlier index " + std::to_string(k) + " out of range");
    if (!seen.insert(k).second) throw ContractError("duplicate outlier index " + std::to_string(k));
  }
  if (!(outlier_scale >= 1.0) || !std::isfinite(outlier_scale))
    throw ContractError("outlier_scale must be >= 1");
  if (!(base_std > 0.0) || !std::isfinite(base_std)) throw ContractError("base_std must be positive");
  if (!std::isfinite(outlier_shift)) throw ContractError("outlier_shift must be finite");
}

nlohmann::json to_json(const OutlierSpec& s) {
  return {{"n_channels", s.n_channels}, {"outlier_indices", s.outlier_indices},
          {"outlier_scale", s.outlier_scale}, {"outlier_shift", s.outlier_shift},
          {"base_std", s.base_std}, {"seed", s.seed}};
}

OutlierSpec outlier_spec_from_json(const nlohmann::json& j) {
  try {
    OutlierSpec s{j.at("n_channels"), j.at("outlier_indices"), j.at("outlier_scale"),
                  j.at("outlier_shift"), j.at("base_std"), j.at("seed")};
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("outlier spec: ") + e.what());
  }
}

MatF gen_activations(const OutlierSpec& spec, std::size_t rows) {
  spec.validate();
  if (rows == 0) throw DomainError("gen_activations: rows must be positive");
  std::vector<bool> is_outlier(spec.n_channels, false);
  for (auto k : spec.outlier_indices) is_outlier[k] = true;
  auto rng = make_rng(spec.seed, kDataStream);
  std::normal_distribution<double> unit(0.0, 1.0);
  MatF x(rows, spec.n_channels, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < spec.n_channels; ++c) {
      const double g = unit(rng);
      x(r, c) = is_outlier[c] ? spec.outlier_shift + spec.base_std * spec.outlier_scale * g
                              : spec.base_std * g;
    }
  return x;
}

void inject_outliers(BlockModel& m, const OutlierSpec& spec) {
  spec.validate();
  if (spec.n_channels != m.dims.hidden)
    throw DimensionError("inject_outliers: spec width != hidden size");
  for (auto k : spec.outlier_indices)
    for (LayerNorm* ln : {&m.ln1, &m.ln2}) {
      ln->gamma[k] = spec.base_std * spec.outlier_scale;
      ln->beta[k] = spec.outlier_shift;
    }
}

MatF gen_inputs(std::size_t rows, std::size_t cols, double std, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw DomainError("gen_inputs: empty shape");
  if (!(std > 0.0)) throw DomainError("gen_inputs: std must be positive");
  auto rng = make_rng(seed, kInputStream);
  std::normal_distribution<double> d(0.0, std);
  std::vector<double> v(rows * cols);
  for (double& e : v) e = d(rng);
  return MatF(rows, cols, std::move(v));
}

MatF run_sequences(const BlockOps& ops, const MatF& x, std::size_t seq_len, BlockTrace* trace) {
  if (trace == nullptr)
    return chunked(x, seq_len, [&](const MatF& s) { return run_block(ops, s); });
  std::array<std::vector<MatF>, 5> parts;
  MatF y = chunked(x, seq_len, [&](const MatF& s) {
    BlockTrace t;
    MatF out = run_block(ops, s, &t);
    parts[0].push_back(std::move(t.ln1_out));
    parts[1].push_back(std::move(t.attn));
    parts[2].push_back(std::move(t.ln2_out));
    parts[3].push_back(std::move(t.hidden));
    return out;
  });
  trace->ln1_out = vstack(parts[0]);
  trace->attn = vstack(parts[1]);
  trace->ln2_out = vstack(parts[2]);
  trace->hidden = vstack(parts[3]);
  trace->output = y;
  return y;
}

BlockCalibration calibrate_block(const BlockModel& m, const MatF& x, std::size_t seq_len,
                                 double clip_ratio) {
  BlockCalibration cal{CalibStats(m.dims.hidden, clip_ratio), CalibStats(m.dims.hidden, clip_ratio)};
  const BlockOps ops = fp_ops(m);
  if (seq_len == 0) throw ContractError("seq_len must be positive");
  for (std::size_t r = 0; r < x.rows(); r += seq_len) {
    BlockTrace t;
    run_block(ops, slice_rows(x, r, std::min(seq_len, x.rows() - r)), &t);
    cal.ln1.observe(t.ln1_out);
    cal.ln2.observe(t.ln2_out);
  }
  return cal;
}

std::string_view to_string(Pipeline p) {
  switch (p) {
    case Pipeline::kPerTensor: return "per_tensor";
    case Pipeline::kPerToken: return "per_token";
    case Pipeline::kChannelNaive: return "channel_naive";
    case Pipeline::kChannelFolded: return "channel_folded";
  }
  return "?";
}

Pipeline parse_pipeline(std::string_view s) {
  for (auto p : {Pipeline::kPerTensor, Pipeline::kPerToken, Pipeline::kChannelNaive,
                 Pipeline::kChannelFolded})
    if (to_string(p) == s) return p;
  throw ContractError("unknown pipeline '" + std::string(s) + "'");
}

QScheme SchemeEntry::weight_scheme() const {
  return {bits, weight_symmetry,
          pipeline == Pipeline::kPerTensor ? Axis::kPerTensor : Axis::kPerChannel};
}

QScheme SchemeEntry::activation_scheme() const {
  switch (pipeline) {
    case Pipeline::kPerTensor: return {bits, Symmetry::kSymmetric, Axis::kPerTensor};
    case Pipeline::kPerToken: return {bits, Symmetry::kSymmetric, Axis::kPerToken};
    default: return {bits, Symmetry::kSymmetric, Axis::kPerChannel};
  }
}

std::string SchemeEntry::label() const {
  return std::string(to_string(pipeline)) + "/int" + std::to_string(bits) +
         (weight_symmetry == Symmetry::kSymmetric ? "/wsym" : "/wasym");
}

nlohmann::json to_json(const SchemeEntry& e) {
  return {{"pipeline", to_string(e.pipeline)}, {"bits", e.bits},
          {"weight_symmetry", to_string(e.weight_symmetry)}};
}

SchemeEntry scheme_entry_from_json(const nlohmann::json& j) {
  try {
    const auto sym = j.at("weight_symmetry").get<std::string>();
    if (sym != "symmetric" && sym != "asymmetric") throw FormatError("bad weight_symmetry '" + sym + "'");
    return {parse_pipeline(j.at("pipeline").get<std::string>()), j.at("bits").get<int>(),
            sym == "symmetric" ? Symmetry::kSymmetric : Symmetry::kAsymmetric};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scheme entry: ") + e.what());
  }
}

std::string_view to_string(LayerId l) {
  switch (l) {
    case LayerId::kQkv: return "qkv";
    case LayerId::kOut: return "out";
    case LayerId::kFc1: return "fc1";
    case LayerId::kFc2: return "fc2";
  }
  return "?";
}

struct PreparedPipeline::State {
  // per_tensor / per_token baselines
  BlockModel model;
  std::array<QTensor, 4> wq;
  QScheme act;
  GemmVariant variant = GemmVariant::kTokenChannel;
  // transformed pipelines
  std::optional<TransformedBlock> folded;
  std::optional<ChannelNaiveBlock> naive;

  const LinearLayer& fp_layer(LayerId id) const {
    switch (id) {
      case LayerId::kQkv: return model.qkv;
      case LayerId::kOut: return model.out;
      case LayerId::kFc1: return model.fc1;
      case LayerId::kFc2: return model.fc2;
    }
    return model.qkv;
  }

  MatF baseline(LayerId id, const MatF& x, OpCount* count) const {
    auto res = gemm(variant, quantize(x, act), wq[static_cast<int>(id)]);
    if (count != nullptr) {
      count->int_mults += res.count.int_mults;
      count->int_adds += res.count.int_adds;
      count->scale_mults += res.count.scale_mults;
      count->zp_mults += res.count.zp_mults;
    }
    add_row_vector(res.y, fp_layer(id).bias);
    return std::move(res.y);
  }
};

PreparedPipeline::PreparedPipeline(const SchemeEntry& entry, const BlockModel& model,
                                   const BlockCalibration& cal, bool symmetrize)
    : entry_(entry) {
  model.validate();
  auto st = std::make_shared<State>();
  const QScheme w = entry.weight_scheme();
  const QScheme a = entry.activation_scheme();
  w.validate();
  switch (entry.pipeline) {
    case Pipeline::kPerTensor:
    case Pipeline::kPerToken:
      if (entry.pipeline == Pipeline::kPerTensor && !w.symmetric())
        throw ContractError("per_tensor pipeline requires symmetric weights");
      st->model = model;
      st->act = a;
      st->variant = entry.pipeline == Pipeline::kPerTensor ? GemmVariant::kTensorTensor
                                                           : GemmVariant::kTokenChannel;
      for (auto id : {LayerId::kQkv, LayerId::kOut, LayerId::kFc1, LayerId::kFc2})
        st->wq[static_cast<int>(id)] = quantize(transpose(st->fp_layer(id).weight), w);
      break;
    case Pipeline::kChannelNaive:
      st->model.residual = model.residual;
      st->naive = build_channel_naive(model, cal.ln1, cal.ln2, w, a, symmetrize);
      break;
    case Pipeline::kChannelFolded:
      st->model.residual = model.residual;
      st->folded = transform_block(model, cal.ln1, cal.ln2, w, a, symmetrize);
      break;
  }
  state_ = std::move(st);
}

BlockOps PreparedPipeline::ops(OpCount* count) const {
  const State* s = state_.get();
  if (s->folded) return s->folded->ops(ExecMode::kQuantized, count);
  if (s->naive) return s->naive->ops(count);
  BlockOps o;
  o.ln1 = [s](const MatF& x) { return s->model.ln1.apply(x); };
  o.ln2 = [s](const MatF& x) { return s->model.ln2.apply(x); };
  o.qkv = [s, count](const MatF& x) { return s->baseline(LayerId::kQkv, x, count); };
  o.out = [s, count](const MatF& x) { return s->baseline(LayerId::kOut, x, count); };
  o.fc1 = [s, count](const MatF& x) { return s->baseline(LayerId::kFc1, x, count); };
  o.fc2 = [s, count](const MatF& x) { return s->baseline(LayerId::kFc2, x, count); };
  o.heads = s->model.dims.heads;
  o.residual = s->model.residual;
  return o;
}

MatF PreparedPipeline::layer(LayerId id, const MatF& x, OpCount* count) const {
  const State* s = state_.get();
  const bool post = s->model.residual == ResidualTap::kPostNorm;
  if (s->folded) {
    const auto& t = *s->folded;
    switch (id) {
      case LayerId::kQkv: return t.qkv.forward_quantized(shift_columns(x, t.qkv.sym_z), count);
      case LayerId::kFc1: return t.fc1.forward_quantized(shift_columns(x, t.fc1.sym_z), count);
      case LayerId::kOut: {
        MatF y = t.out.forward_quantized(x, count);
        if (post) subtract_row_vector(y, t.qkv.sym_z);
        return y;
      }
      case LayerId::kFc2: {
        MatF y = t.fc2.forward_quantized(x, count);
        if (post) subtract_row_vector(y, t.fc1.sym_z);
        return y;
      }
    }
  }
  if (s->naive) {
    const auto& t = *s->naive;
    switch (id) {
      case LayerId::kQkv: return t.qkv.forward_quantized(shift_columns(x, t.qkv.sym_z), count);
      case LayerId::kFc1: return t.fc1.forward_quantized(shift_columns(x, t.fc1.sym_z), count);
      case LayerId::kOut: {
        MatF y = t.out.forward_quantized(x, count);
        if (post) subtract_row_vector(y, t.qkv.sym_z);
        return y;
      }
      case LayerId::kFc2: {
        MatF y = t.fc2.forward_quantized(x, count);
        if (post) subtract_row_vector(y, t.fc1.sym_z);
        return y;
      }
    }
  }
  return s->baseline(id, x, count);
}

void ExperimentConfig::validate() const {
  if (schemes.empty()) throw ContractError("experiment: scheme list is empty");
  if (calib_rows == 0 || eval_rows == 0 || seq_len == 0)
    throw ContractError("experiment: row counts and seq_len must be positive");
  if (outliers.n_channels != dims.hidden)
    throw ContractError("experiment: outlier spec width != hidden size");
  if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw ContractError("experiment: clip_ratio must be in (0, 1]");
  outliers.validate();
  for (const auto& e : schemes) e.weight_scheme().validate();
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json schemes = nlohmann::json::array();
  for (const auto& e : c.schemes) schemes.push_back(to_json(e));
  return {{"dims", {{"hidden", c.dims.hidden}, {"heads", c.dims.heads}, {"ffn", c.dims.ffn}}},
          {"residual", to_string(c.residual)},
          {"outliers", to_json(c.outliers)},
          {"schemes", schemes},
          {"calib_rows", c.calib_rows},
          {"eval_rows", c.eval_rows},
          {"seq_len", c.seq_len},
          {"symmetrize", c.symmetrize},
          {"clip_ratio", c.clip_ratio},
          {"seed", c.seed}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    const auto& d = j.at("dims");
    c.dims = {d.at("hidden"), d.at("heads"), d.at("ffn")};
    c.residual = parse_residual_tap(j.at("residual").get<std::string>());
    c.outliers = outlier_spec_from_json(j.at("outliers"));
    for (const auto& e : j.at("schemes")) c.schemes.push_back(scheme_entry_from_json(e));
    c.calib_rows = j.at("calib_rows");
    c.eval_rows = j.at("eval_rows");
    c.seq_len = j.at("seq_len");
    c.symmetrize = j.at("symmetrize");
    c.clip_ratio = j.at("clip_ratio");
    c.seed = j.at("seed");
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("experiment config: ") + e.what());
  }
}

ExperimentSetup setup_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentSetup s{random_block(cfg.dims, cfg.seed, cfg.residual),
                    gen_inputs(cfg.calib_rows, cfg.dims.hidden, cfg.outliers.base_std, cfg.seed),
                    gen_inputs(cfg.eval_rows, cfg.dims.hidden, cfg.outliers.base_std, cfg.seed + 1),
                    {CalibStats(), CalibStats()}};
  inject_outliers(s.model, cfg.outliers);
  s.calibration = calibrate_block(s.model, s.calib_x, cfg.seq_len, cfg.clip_ratio);
  return s;
}

nlohmann::json to_json(const PipelineMetrics& m) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    layers[std::string(to_string(static_cast<LayerId>(l)))] = to_json(m.layers[l]);
  return {{"output", to_json(m.output)},
          {"output_mse", m.output.mse},
          {"output_sqnr_db", json_number(m.output.sqnr_db)},
          {"max_rel_err", m.max_rel_err},
          {"rel_frobenius", m.rel_frobenius},
          {"layers", layers},
          {"ops", to_json(m.ops)},
          {"wall_ns", m.wall_ns}};
}

PipelineMetrics evaluate_pipeline(const PreparedPipeline& p, const BlockModel& fp_model,
                                  const MatF& eval_x, std::size_t seq_len) {
  BlockTrace trace;
  const MatF y_fp = run_sequences(fp_ops(fp_model), eval_x, seq_len, &trace);

  PipelineMetrics m;
  const auto t0 = std::chrono::steady_clock::now();
  const MatF y = run_sequences(p.ops(&m.ops), eval_x, seq_len);
  m.wall_ns = elapsed_ns(t0);

  m.output = error_metrics(y_fp, y);
  const double peak = max_abs(y_fp);
  m.max_rel_err = peak > 0.0 ? m.output.max_abs_err / peak : m.output.max_abs_err;
  m.rel_frobenius = rel_frobenius_error(y, y_fp);

  const std::array<std::pair<LayerId, const MatF*>, 4> inputs{
      {{LayerId::kQkv, &trace.ln1_out}, {LayerId::kOut, &trace.attn},
       {LayerId::kFc1, &trace.ln2_out}, {LayerId::kFc2, &trace.hidden}}};
  const std::array<const LinearLayer*, 4> fp{&fp_model.qkv, &fp_model.out, &fp_model.fc1, &fp_model.fc2};
  for (const auto& [id, in] : inputs) {
    const MatF ref = fp[static_cast<int>(id)]->apply(*in);
    const MatF q = chunked(*in, seq_len, [&](const MatF& s) { return p.layer(id, s); });
    m.layers.push_back(error_metrics(ref, q));
  }
  return m;
}

AxisErrors activation_axis_errors(const MatF& x, int bits) {
  return {quant_error(x, {bits, Symmetry::kSymmetric, Axis::kPerTensor}),
          quant_error(x, {bits, Symmetry::kSymmetric, Axis::kPerToken}),
          quant_error(x, {bits, Symmetry::kSymmetric, Axis::kPerChannel})};
}

namespace {

std::string bits_key(int bits) { return "int" + std::to_string(bits); }

}  // namespace

Report run_scheme_comparison(const ExperimentConfig& cfg) {
  const auto setup = setup_experiment(cfg);
  nlohmann::json schemes = nlohmann::json::object();
  nlohmann::json timing = nlohmann::json::object();
  std::map<std::pair<int, Pipeline>, double> mse;
  for (const auto& e : cfg.schemes) {
    PreparedPipeline p(e, setup.model, setup.calibration, cfg.symmetrize);
    const auto m = evaluate_pipeline(p, setup.model, setup.eval_x, cfg.seq_len);
    auto j = to_json(m);
    j["scheme"] = to_json(e);
    schemes[e.label()] = std::move(j);
    timing[e.label()] = m.wall_ns;
    mse.emplace(std::pair{e.bits, e.pipeline}, m.output.mse);
  }

  std::set<int> bits;
  for (const auto& e : cfg.schemes) bits.insert(e.bits);
  const MatF acts = gen_activations(cfg.outliers, cfg.eval_rows);
  nlohmann::json activation = nlohmann::json::object();
  nlohmann::json ordering = nlohmann::json::object();
  for (int b : bits) {
    const auto ax = activation_axis_errors(acts, b);
    activation[bits_key(b)] = {{"per_tensor", to_json(ax.per_tensor)},
                               {"per_token", to_json(ax.per_token)},
                               {"per_channel", to_json(ax.per_channel)}};
    nlohmann::json o = {{"activation_channel_le_tenth_token", ax.per_channel.mse <= 0.1 * ax.per_token.mse},
                        {"activation_token_le_tensor", ax.per_token.mse <= ax.per_tensor.mse}};
    auto has = [&](Pipeline p) { return mse.count({b, p}) != 0; };
    if (has(Pipeline::kChannelFolded) && has(Pipeline::kPerToken))
      o["block_folded_lt_token"] = mse[{b, Pipeline::kChannelFolded}] < mse[{b, Pipeline::kPerToken}];
    if (has(Pipeline::kPerToken) && has(Pipeline::kPerTensor))
      o["block_token_lt_tensor"] = mse[{b, Pipeline::kPerToken}] < mse[{b, Pipeline::kPerTensor}];
    ordering[bits_key(b)] = o;
  }

  Report r{to_json(cfg), cfg.seed, {}};
  r.results = {{"schemes", schemes}, {"activation", activation}, {"ordering", ordering}, {"timing", timing}};
  return r;
}

std::vector<std::string> ordering_violations(const Report& r) {
  std::vector<std::string> bad;
  if (!r.results.contains("ordering")) return bad;
  for (const auto& [bits, checks] : r.results.at("ordering").items())
    for (const auto& [name, ok] : checks.items())
      if (ok.is_boolean() && !ok.get<bool>()) bad.push_back(bits + "." + name);
  return bad;
}

std::vector<AblationRow> ablation_rows(const ExperimentConfig& cfg) {
  for (const auto& e : cfg.schemes)
    if (e.pipeline != Pipeline::kChannelFolded && e.pipeline != Pipeline::kChannelNaive)
      throw ContractError("ablation: symmetrization applies only to per-channel pipelines");
  const auto setup = setup_experiment(cfg);
  const MatF y_fp = run_sequences(fp_ops(setup.model), setup.eval_x, cfg.seq_len);
  std::vector<AblationRow> rows;
  for (const auto& e : cfg.schemes) {
    AblationRow row{e};
    for (bool sym : {true, false}) {
      PreparedPipeline p(e, setup.model, setup.calibration, sym);
      const MatF y = run_sequences(p.ops(), setup.eval_x, cfg.seq_len);
      (sym ? row.mse_on : row.mse_off) = error_metrics(y_fp, y).mse;
    }
    rows.push_back(row);
  }
  return rows;
}

Report run_ablation(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = ablation_rows(cfg);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    const double off_on = r.mse_on > 0.0 ? r.mse_off / r.mse_on : std::numeric_limits<double>::infinity();
    const double on_off = r.mse_off > 0.0 ? r.mse_on / r.mse_off : std::numeric_limits<double>::infinity();
    out.push_back({{"scheme", to_json(r.entry)},
                   {"label", r.entry.label()},
                   {"mse_sym_on", r.mse_on},
                   {"mse_sym_off", r.mse_off},
                   {"ratio_off_over_on", json_number(off_on)},
                   {"ratio_on_over_off", json_number(on_off)}});
  }
  Report r{to_json(cfg), cfg.seed, {}};
  r.results = {{"ablation", out}, {"timing", {{"wall_ns", elapsed_ns(t0)}}}};
  return r;
}

ExperimentConfig default_ablation_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.outliers = {64, {5}, 12.0, -75.0, 1.0, seed};
  c.schemes = {{Pipeline::kChannelFolded, 8, Symmetry::kAsymmetric},
               {Pipeline::kChannelFolded, 6, Symmetry::kSymmetric}};
  c.seed = seed;
  return c;
}

std::vector<GemmShape> parse_shapes(std::string_view s) {
  std::vector<GemmShape> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = std::min(s.find(',', pos), s.size());
    const std::string tok(s.substr(pos, comma - pos));
    std::size_t v[3];
    char tail = 0;
    if (std::sscanf(tok.c_str(), "%zux%zux%zu%c", &v[0], &v[1], &v[2], &tail) != 3 || v[0] == 0 ||
        v[1] == 0 || v[2] == 0)
      throw ContractError("bad shape '" + tok + "' (expected IxNxJ with positive sizes)");
    out.push_back({v[0], v[1], v[2]});
    pos = comma + 1;
  }
  return out;
}

GemmOperands random_operands(GemmVariant v, const GemmShape& s, int bits, bool asymmetric_weights,
                             std::uint64_t seed) {
  if (v == GemmVariant::kTensorTensor && asymmetric_weights)
    throw ContractError("tensor_tensor takes symmetric weights");
  auto rng = make_rng(seed, kGemmStream);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> xv(s.i * s.n), wv(s.n * s.j);
  for (double& e : xv) e = d(rng);
  for (double& e : wv) e = d(rng) + (asymmetric_weights ? 0.75 : 0.0);
  Axis xa = Axis::kPerChannel, wa = Axis::kPerChannel;
  if (v == GemmVariant::kTensorTensor) xa = wa = Axis::kPerTensor;
  if (v == GemmVariant::kTokenChannel) xa = Axis::kPerToken;
  return {quantize(MatF(s.i, s.n, std::move(xv)), {bits, Symmetry::kSymmetric, xa}),
          quantize(MatF(s.n, s.j, std::move(wv)),
                   {bits, asymmetric_weights ? Symmetry::kAsymmetric : Symmetry::kSymmetric, wa})};
}

namespace {

nlohmann::json shape_json(const GemmShape& s) { return {{"i", s.i}, {"n", s.n}, {"j", s.j}}; }

}  // namespace

Report run_opcount_check(const std::vector<GemmShape>& shapes, std::uint64_t seed) {
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json cfg_shapes = nlohmann::json::array();
  bool all_ok = true;
  std::uint64_t k = 0;
  for (const auto& s : shapes) {
    cfg_shapes.push_back(shape_json(s));
    for (bool asym : {false, true}) {
      const auto op = random_operands(GemmVariant::kChannelChannelNaive, s, 8, asym, seed + k++);
      const auto naive = gemm_channel_naive(op.x, op.w).count;
      const auto folded = gemm_channel_folded(op.x, op.w).count;
      const std::uint64_t saving = naive.scale_mults - folded.scale_mults;
      const std::uint64_t expect = std::uint64_t{s.i} * s.j * s.n;
      const bool ok = saving == expect &&
                      naive == expected_op_count(GemmVariant::kChannelChannelNaive, s.i, s.n, s.j, asym) &&
                      folded == expected_op_count(GemmVariant::kChannelChannelFolded, s.i, s.n, s.j, asym);
      all_ok = all_ok && ok;
      auto row = shape_json(s);
      row["asymmetric_weights"] = asym;
      row["naive"] = to_json(naive);
      row["folded"] = to_json(folded);
      row["scale_mult_saving"] = saving;
      row["expected_saving"] = expect;
      row["ok"] = ok;
      rows.push_back(row);
    }
  }
  Report r{{{"command", "opcount"}, {"shapes", cfg_shapes}, {"seed", seed}}, seed, {}};
  r.results = {{"shapes", rows}, {"all_ok", all_ok}};
  return r;
}

Report run_bench(const std::vector<GemmShape>& shapes, std::size_t repeats, std::uint64_t seed) {
  if (repeats == 0) throw ContractError("bench: repeats must be positive");
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json cfg_shapes = nlohmann::json::array();
  nlohmann::json ratios = nlohmann::json::array();
  for (const auto& s : shapes) {
    cfg_shapes.push_back(shape_json(s));
    std::uint64_t naive_ns = 0, folded_ns = 0;
    for (auto v : {GemmVariant::kTensorTensor, GemmVariant::kTokenChannel,
                   GemmVariant::kChannelChannelNaive, GemmVariant::kChannelChannelFolded}) {
      const auto op = random_operands(v, s, 8, false, seed);
      std::vector<std::uint64_t> times;
      OpCount count;
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        auto res = gemm(v, op.x, op.w);
        times.push_back(std::max<std::uint64_t>(elapsed_ns(t0), 1));
        count = res.count;
      }
      std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
      const std::uint64_t median = times[times.size() / 2];
      if (v == GemmVariant::kChannelChannelNaive) naive_ns = median;
      if (v == GemmVariant::kChannelChannelFolded) folded_ns = median;
      auto row = shape_json(s);
      row["variant"] = to_string(v);
      row["scale_mults"] = count.scale_mults;
      row["int_mults"] = count.int_mults;
      row["ops_match_closed_form"] = count == expected_op_count(v, s.i, s.n, s.j, false);
      row["wall_ns_median"] = median;
      rows.push_back(row);
    }
    auto t = shape_json(s);
    t["naive_over_folded"] = static_cast<double>(naive_ns) / static_cast<double>(folded_ns);
    ratios.push_back(t);
  }
  Report r{{{"command", "bench"}, {"shapes", cfg_shapes}, {"repeats", repeats}, {"seed", seed}}, seed, {}};
  r.results = {{"kernels", rows}, {"timing", {{"naive_over_folded", ratios}}}};
  return r;
}

}  // namespace otune
