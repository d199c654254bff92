#include "outliertune/cli.hpp"

#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "outliertune/checkpoint.hpp"
#include "outliertune/errors.hpp"
#include "outliertune/harness.hpp"
#include "outliertune/report.hpp"

namespace otune {

namespace {

using nlohmann::json;

struct Common {
  std::string format = "json";
  std::string out;
};

void add_output_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--report", c.out, "Write the report here instead of stdout");
}

void emit(const Report& r, const Common& c, std::ostream& out) {
  const json j = r.to_json();
  const std::string text = c.format == "csv" ? to_csv(j) : j.dump(2) + "\n";
  if (c.out.empty()) {
    out << text;
    return;
  }
  std::ofstream f(c.out, std::ios::binary | std::ios::trunc);
  if (!(f << text)) throw FormatError("cannot write report to '" + c.out + "'");
}

json read_json_file(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct WeightFlags {
  int bits = 8;
  bool symmetric = false;
  bool asymmetric = false;
  std::string axis = "per_channel";

  Symmetry symmetry() const { return asymmetric ? Symmetry::kAsymmetric : Symmetry::kSymmetric; }
};

void add_weight_flags(CLI::App* cmd, WeightFlags& w) {
  cmd->add_option("--bits", w.bits, "Bit width (4, 6 or 8)");
  auto* s = cmd->add_flag("--symmetric", w.symmetric, "Symmetric weights (default)");
  auto* a = cmd->add_flag("--asymmetric", w.asymmetric, "Asymmetric weights with zero points");
  s->excludes(a);
  cmd->add_option("--axis", w.axis, "Weight quantization axis");
}

// Calibration file: {"schema":1,"kind":"calibration",...,"ln1":stats,"ln2":stats}.
BlockCalibration read_calibration(const std::string& path) {
  const json j = read_json_file(path);
  try {
    if (j.at("kind") != "calibration" || j.at("schema") != 1)
      throw FormatError("'" + path + "' is not a calibration file");
    return {CalibStats::from_json(j.at("ln1")), CalibStats::from_json(j.at("ln2"))};
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

json candidate_metrics(const MatF& y_fp, const MatF& y) {
  const auto m = error_metrics(y_fp, y);
  const double peak = max_abs(y_fp);
  return {{"output", to_json(m)},
          {"output_mse", m.mse},
          {"output_sqnr_db", json_number(m.sqnr_db)},
          {"max_rel_err", peak > 0.0 ? m.max_abs_err / peak : m.max_abs_err},
          {"rel_frobenius", rel_frobenius_error(y, y_fp)}};
}

std::uint64_t ns_since(std::chrono::steady_clock::time_point t0) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"OutlierTune post-training quantization toolkit", "otune"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  // gen-model
  Common gen_io;
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_residual = "pre_norm";
  BlockDims gen_dims;
  std::vector<std::size_t> gen_outliers;
  double gen_oscale = 1.0, gen_oshift = 0.0;
  bool gen_f32 = false;
  auto* gen = app.add_subcommand("gen-model", "Write a random block model checkpoint");
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--out", gen_out, "Checkpoint path")->required();
  gen->add_option("--hidden", gen_dims.hidden);
  gen->add_option("--heads", gen_dims.heads);
  gen->add_option("--ffn", gen_dims.ffn);
  gen->add_option("--residual", gen_residual)->check(CLI::IsMember({"pre_norm", "post_norm"}));
  gen->add_option("--outlier-channels", gen_outliers, "LayerNorm channels to turn into outliers");
  gen->add_option("--outlier-scale", gen_oscale, "Outlier gamma");
  gen->add_option("--outlier-shift", gen_oshift, "Outlier beta");
  gen->add_flag("--f32", gen_f32, "Store float tensors as f32");
  add_output_flags(gen, gen_io);

  // calibrate
  Common cal_io;
  std::string cal_model, cal_out, cal_clip_str;
  std::uint64_t cal_seed = 0;
  std::size_t cal_rows = 512, cal_seq = 16;
  double cal_std = 1.0;
  auto* cal = app.add_subcommand("calibrate", "Min/max calibration of both LayerNorm outputs");
  cal->add_option("--model", cal_model)->required();
  cal->add_option("--seed", cal_seed)->required();
  cal->add_option("--out", cal_out, "Calibration JSON path")->required();
  cal->add_option("--rows", cal_rows)->check(CLI::PositiveNumber);
  cal->add_option("--seq-len", cal_seq)->check(CLI::PositiveNumber);
  cal->add_option("--input-std", cal_std)->check(CLI::PositiveNumber);
  auto* clip_opt = cal->add_option("--clip-ratio", cal_clip_str, "Token-wise clipping quantile (0.999 if no value)")
                       ->expected(0, 1);
  add_output_flags(cal, cal_io);

  // transform
  Common tr_io;
  std::string tr_model, tr_stats, tr_out;
  WeightFlags tr_w;
  int tr_act_bits = 0;
  bool tr_nosym = false;
  auto* tr = app.add_subcommand("transform", "Symmetrize, fold activation scales, quantize weights");
  tr->add_option("--model", tr_model)->required();
  tr->add_option("--stats", tr_stats)->required();
  tr->add_option("--out", tr_out)->required();
  add_weight_flags(tr, tr_w);
  tr->add_option("--act-bits", tr_act_bits, "Activation bits (default: --bits)");
  tr->add_flag("--no-sym", tr_nosym, "Disable symmetrization");
  add_output_flags(tr, tr_io);

  // eval
  Common ev_io;
  std::string ev_model, ev_cand;
  std::uint64_t ev_seed = 0;
  std::size_t ev_rows = 2048, ev_seq = 16;
  double ev_std = 1.0;
  WeightFlags ev_w;
  bool ev_noquant = false;
  auto* ev = app.add_subcommand("eval", "Compare a candidate model against the FP original");
  ev->add_option("--model", ev_model, "Original checkpoint")->required();
  ev->add_option("--transformed", ev_cand, "Candidate checkpoint (plain or transformed)");
  ev->add_option("--seed", ev_seed)->required();
  ev->add_option("--rows", ev_rows)->check(CLI::PositiveNumber);
  ev->add_option("--seq-len", ev_seq)->check(CLI::PositiveNumber);
  ev->add_option("--input-std", ev_std)->check(CLI::PositiveNumber);
  add_weight_flags(ev, ev_w);
  ev->add_flag("--no-quant", ev_noquant, "Run the candidate with quantization bypassed");
  add_output_flags(ev, ev_io);

  // bench
  Common be_io;
  std::string be_shapes = "16x64x64,16x256x256,16x1024x256";
  std::size_t be_repeats = 30;
  std::uint64_t be_seed = 0;
  auto* be = app.add_subcommand("bench", "Time the four GEMM variants");
  be->add_option("--shapes", be_shapes, "Comma-separated IxNxJ");
  be->add_option("--repeats", be_repeats)->check(CLI::PositiveNumber);
  be->add_option("--seed", be_seed)->required();
  add_output_flags(be, be_io);

  // experiment
  Common ex_io;
  std::string ex_suite = "compare", ex_config, ex_shapes = "1x1x1,8x16x4,3x5x7";
  std::uint64_t ex_seed = 0;
  bool ex_check = false, ex_nosym = false;
  double ex_clip = 1.0;
  auto* ex = app.add_subcommand("experiment", "Scheme comparison, symmetrization ablation, op counts");
  ex->add_option("--suite", ex_suite)->check(CLI::IsMember({"compare", "ablation", "opcount"}));
  ex->add_option("--seed", ex_seed)->required();
  ex->add_option("--config", ex_config, "ExperimentConfig JSON (seed is overridden)");
  ex->add_option("--shapes", ex_shapes, "Shapes for the opcount suite");
  ex->add_option("--clip-ratio", ex_clip)->check(CLI::Range(1e-9, 1.0));
  ex->add_flag("--no-sym", ex_nosym, "Disable symmetrization (compare suite)");
  ex->add_flag("--check", ex_check, "Exit 3 when an ordering check fails");
  add_output_flags(ex, ex_io);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "otune: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) {
      BlockModel m = random_block(gen_dims, gen_seed, parse_residual_tap(gen_residual));
      if (!gen_outliers.empty())
        inject_outliers(m, {gen_dims.hidden, gen_outliers, gen_oscale, gen_oshift, 1.0, gen_seed});
      const auto bytes = to_archive(m, gen_f32 ? DType::kF32 : DType::kF64).encode();
      write_file(gen_out, bytes);
      Report r{{{"command", "gen-model"},
                {"dims", {{"hidden", gen_dims.hidden}, {"heads", gen_dims.heads}, {"ffn", gen_dims.ffn}}},
                {"residual", gen_residual},
                {"outlier_channels", gen_outliers},
                {"outlier_scale", gen_oscale},
                {"outlier_shift", gen_oshift},
                {"dtype", gen_f32 ? "f32" : "f64"}},
               gen_seed,
               {{"bytes", bytes.size()},
                {"fnv1a64", hex64(fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size()}))}}};
      emit(r, gen_io, out);
    } else if (*cal) {
      double clip = 1.0;
      if (clip_opt->count() > 0) {
        try {
          clip = cal_clip_str.empty() ? 0.999 : std::stod(cal_clip_str);
        } catch (const std::exception&) {
          err << "otune: --clip-ratio: not a number\n";
          return kExitUsage;
        }
        if (!(clip > 0.0 && clip <= 1.0)) {
          err << "otune: --clip-ratio must be in (0, 1]\n";
          return kExitUsage;
        }
      }
      const BlockModel m = load_model(cal_model);
      const MatF x = gen_inputs(cal_rows, m.dims.hidden, cal_std, cal_seed);
      const auto c = calibrate_block(m, x, cal_seq, clip);
      const json file = {{"schema", 1}, {"kind", "calibration"}, {"seed", cal_seed},
                         {"rows", cal_rows}, {"seq_len", cal_seq}, {"input_std", cal_std},
                         {"ln1", c.ln1.to_json()}, {"ln2", c.ln2.to_json()}};
      const std::string text = file.dump(2) + "\n";
      write_text(cal_out, text);
      Report r{{{"command", "calibrate"}, {"rows", cal_rows}, {"seq_len", cal_seq},
                {"input_std", cal_std}, {"clip_ratio", clip}},
               cal_seed,
               {{"channels", c.ln1.channels()}, {"samples", c.ln1.count()},
                {"fnv1a64", hex64(fnv1a64(text))}}};
      emit(r, cal_io, out);
    } else if (*tr) {
      if (tr_w.axis != "per_channel") {
        parse_axis(tr_w.axis);  // unknown names are contract errors too
        throw ContractError("transform: weights must be quantized per_channel, got " + tr_w.axis);
      }
      const BlockModel m = load_model(tr_model);
      const auto c = read_calibration(tr_stats);
      const QScheme ws{tr_w.bits, tr_w.symmetry(), Axis::kPerChannel};
      const QScheme as{tr_act_bits == 0 ? tr_w.bits : tr_act_bits, Symmetry::kSymmetric, Axis::kPerChannel};
      const auto t = transform_block(m, c.ln1, c.ln2, ws, as, !tr_nosym);
      const auto bytes = to_archive(t).encode();
      write_file(tr_out, bytes);
      Report r{{{"command", "transform"}, {"weight", to_json(ws)}, {"activation", to_json(as)},
                {"symmetrize", !tr_nosym}},
               0,
               {{"bytes", bytes.size()},
                {"fnv1a64", hex64(fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size()}))},
                {"ln1_z_max_abs", max_abs(MatF(1, t.qkv.sym_z.size(), t.qkv.sym_z))},
                {"ln2_z_max_abs", max_abs(MatF(1, t.fc1.sym_z.size(), t.fc1.sym_z))}}};
      emit(r, tr_io, out);
    } else if (*ev) {
      const BlockModel orig = load_model(ev_model);
      const MatF x = gen_inputs(ev_rows, orig.dims.hidden, ev_std, ev_seed);
      const MatF y_fp = run_sequences(fp_ops(orig), x, ev_seq);

      json results = json::object();
      json timing = json::object();
      json cand = json::object();
      int bits = ev_w.bits;
      Symmetry wsym = ev_w.symmetry();
      const auto t0 = std::chrono::steady_clock::now();
      if (ev_cand.empty()) {
        cand = candidate_metrics(y_fp, y_fp);
        cand["kind"] = "model";
        cand["mode"] = "fp";
      } else {
        const auto archive = TensorArchive::decode(read_file(ev_cand));
        if (is_transformed(archive)) {
          const auto t = transformed_from_archive(archive);
          if (t.dims != orig.dims) throw DimensionError("eval: candidate dims differ from the original");
          OpCount ops;
          const MatF y = run_sequences(
              t.ops(ev_noquant ? ExecMode::kBypass : ExecMode::kQuantized, &ops), x, ev_seq);
          cand = candidate_metrics(y_fp, y);
          cand["kind"] = "transformed";
          cand["mode"] = ev_noquant ? "bypass" : "quantized";
          cand["ops"] = to_json(ops);
          bits = t.options.activation.bits;
          wsym = t.options.weight.symmetry;
        } else {
          const auto m = model_from_archive(archive);
          if (m.dims != orig.dims) throw DimensionError("eval: candidate dims differ from the original");
          cand = candidate_metrics(y_fp, run_sequences(fp_ops(m), x, ev_seq));
          cand["kind"] = "model";
          cand["mode"] = "fp";
        }
      }
      timing["candidate_wall_ns"] = ns_since(t0);
      results["candidate"] = cand;

      if (!ev_noquant) {
        json base = json::object();
        for (auto p : {Pipeline::kPerTensor, Pipeline::kPerToken}) {
          const SchemeEntry e{p, bits, p == Pipeline::kPerTensor ? Symmetry::kSymmetric : wsym};
          PreparedPipeline pp(e, orig, {CalibStats(), CalibStats()}, false);
          const auto t1 = std::chrono::steady_clock::now();
          OpCount ops;
          const MatF y = run_sequences(pp.ops(&ops), x, ev_seq);
          timing[std::string(to_string(p)) + "_wall_ns"] = ns_since(t1);
          auto j = candidate_metrics(y_fp, y);
          j["scheme"] = to_json(e);
          j["ops"] = to_json(ops);
          base[std::string(to_string(p))] = j;
        }
        results["baselines"] = base;
        results["ordering"] = {
            {"candidate_lt_per_token", cand["output_mse"].get<double>() < base["per_token"]["output_mse"].get<double>()},
            {"per_token_lt_per_tensor",
             base["per_token"]["output_mse"].get<double>() < base["per_tensor"]["output_mse"].get<double>()}};
      }
      results["timing"] = timing;
      Report r{{{"command", "eval"}, {"rows", ev_rows}, {"seq_len", ev_seq}, {"input_std", ev_std},
                {"bits", bits}, {"weight_symmetry", to_string(wsym)}, {"no_quant", ev_noquant},
                {"has_candidate", !ev_cand.empty()}},
               ev_seed, results};
      emit(r, ev_io, out);
    } else if (*be) {
      emit(run_bench(parse_shapes(be_shapes), be_repeats, be_seed), be_io, out);
    } else if (*ex) {
      if (ex_suite == "opcount") {
        const Report r = run_opcount_check(parse_shapes(ex_shapes), ex_seed);
        emit(r, ex_io, out);
        if (ex_check && !r.results.at("all_ok").get<bool>()) {
          err << "otune: op-count law violated\n";
          return kExitContract;
        }
        return kExitOk;
      }
      ExperimentConfig cfg;
      if (!ex_config.empty()) {
        cfg = experiment_config_from_json(read_json_file(ex_config));
      } else if (ex_suite == "ablation") {
        cfg = default_ablation_config(ex_seed);
      } else {
        cfg = default_ablation_config(ex_seed);
        cfg.schemes.clear();
        for (auto p : {Pipeline::kPerTensor, Pipeline::kPerToken, Pipeline::kChannelNaive,
                       Pipeline::kChannelFolded})
          cfg.schemes.push_back({p, 8, Symmetry::kSymmetric});
      }
      cfg.seed = ex_seed;
      cfg.outliers.seed = ex_seed;
      cfg.clip_ratio = ex_clip;
      if (ex_nosym) cfg.symmetrize = false;
      const Report r = ex_suite == "ablation" ? run_ablation(cfg) : run_scheme_comparison(cfg);
      emit(r, ex_io, out);
      if (ex_check) {
        const auto bad = ordering_violations(r);
        for (const auto& b : bad) err << "otune: ordering check failed: " << b << "\n";
        if (!bad.empty()) return kExitContract;
      }
    }
    return kExitOk;
  } catch (const FormatError& e) {
    err << "otune: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "otune: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    err << "otune: " << e.what() << "\n";
    return kExitContract;
  }
}

}  // namespace otune
