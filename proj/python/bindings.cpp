// numpy-facing wrapper over the core library. Matrices cross the boundary as
// C-contiguous float64 arrays (int8 for codes).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "outliertune/checkpoint.hpp"
#include "outliertune/cli.hpp"
#include "outliertune/harness.hpp"

namespace py = pybind11;
using namespace otune;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

MatF to_mat(const F64Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return MatF(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

py::array_t<double> to_array(const MatF& m) {
  py::array_t<double> a({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), a.mutable_data());
  return a;
}

py::array_t<std::int8_t> to_array(const MatI8& m) {
  py::array_t<std::int8_t> a({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), a.mutable_data());
  return a;
}

QScheme scheme(int bits, bool symmetric, const std::string& axis) {
  QScheme s{bits, symmetric ? Symmetry::kSymmetric : Symmetry::kAsymmetric, parse_axis(axis)};
  s.validate();
  return s;
}

py::dict op_dict(const OpCount& c) {
  py::dict d;
  d["int_mults"] = c.int_mults;
  d["int_adds"] = c.int_adds;
  d["scale_mults"] = c.scale_mults;
  d["zp_mults"] = c.zp_mults;
  return d;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Per-channel activation quantization with folded scales and symmetrization";
  m.attr("__version__") = std::string(version());

  // Translators run newest first, so the derived type goes last.
  py::register_exception<Error>(m, "OutlierTuneError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def(
      "quantize",
      [](const F64Array& x, int bits, bool symmetric, const std::string& axis) {
        const auto q = quantize(to_mat(x), scheme(bits, symmetric, axis));
        py::dict d;
        d["codes"] = to_array(q.ints);
        d["scales"] = q.scales;
        d["zero_points"] = q.zero_points;
        d["storage_offset"] = q.scheme.storage_offset();
        return d;
      },
      py::arg("x"), py::arg("bits") = 8, py::arg("symmetric") = true, py::arg("axis") = "per_channel",
      "Dynamic quantization. codes are storage codes: logical code = code + storage_offset.");
  m.def(
      "fake_quantize",
      [](const F64Array& x, int bits, bool symmetric, const std::string& axis) {
        return to_array(fake_quantize(to_mat(x), scheme(bits, symmetric, axis)));
      },
      py::arg("x"), py::arg("bits") = 8, py::arg("symmetric") = true, py::arg("axis") = "per_channel");
  m.def(
      "quant_mse",
      [](const F64Array& x, int bits, bool symmetric, const std::string& axis) {
        return quant_error(to_mat(x), scheme(bits, symmetric, axis)).mse;
      },
      py::arg("x"), py::arg("bits") = 8, py::arg("symmetric") = true, py::arg("axis") = "per_channel");
  m.def(
      "fold_weights",
      [](const F64Array& w, const std::vector<double>& sx) { return to_array(fold_weights(to_mat(w), sx)); },
      py::arg("w"), py::arg("sx"));
  m.def(
      "expected_op_count",
      [](const std::string& variant, std::size_t i, std::size_t n, std::size_t j, bool asym) {
        return op_dict(expected_op_count(parse_variant(variant), i, n, j, asym));
      },
      py::arg("variant"), py::arg("i"), py::arg("n"), py::arg("j"), py::arg("asymmetric_weights") = false);
  m.def(
      "gen_activations",
      [](std::size_t rows, std::size_t channels, std::vector<std::size_t> outliers, double scale, double shift,
         std::uint64_t seed) {
        return to_array(gen_activations({channels, std::move(outliers), scale, shift, 1.0, seed}, rows));
      },
      py::arg("rows"), py::arg("channels") = 64, py::arg("outliers") = std::vector<std::size_t>{},
      py::arg("outlier_scale") = 1.0, py::arg("outlier_shift") = 0.0, py::arg("seed") = 0);
  m.def(
      "gen_inputs",
      [](std::size_t rows, std::size_t cols, double std, std::uint64_t seed) {
        return to_array(gen_inputs(rows, cols, std, seed));
      },
      py::arg("rows"), py::arg("cols") = 64, py::arg("std") = 1.0, py::arg("seed") = 0);

  py::class_<CalibStats>(m, "CalibStats")
      .def(py::init<std::size_t, double>(), py::arg("channels"), py::arg("clip_ratio") = 1.0)
      .def("observe", [](CalibStats& s, const F64Array& x) { s.observe(to_mat(x)); })
      .def("merge", &CalibStats::merge)
      .def_property_readonly("min", &CalibStats::min)
      .def_property_readonly("max", &CalibStats::max)
      .def_property_readonly("count", &CalibStats::count)
      .def("__eq__", [](const CalibStats& a, const CalibStats& b) { return a == b; });

  py::class_<BlockModel>(m, "BlockModel")
      .def_static(
          "random",
          [](std::size_t hidden, std::size_t heads, std::size_t ffn, std::uint64_t seed, const std::string& residual) {
            return random_block({hidden, heads, ffn}, seed, parse_residual_tap(residual));
          },
          py::arg("hidden") = 64, py::arg("heads") = 4, py::arg("ffn") = 256, py::arg("seed") = 0,
          py::arg("residual") = "pre_norm")
      .def_static("load", [](const std::string& p) { return load_model(p); })
      .def("save", [](const BlockModel& b, const std::string& p) { save_model(p, b); })
      .def(
          "inject_outliers",
          [](BlockModel& b, std::vector<std::size_t> channels, double scale, double shift) {
            inject_outliers(b, {b.dims.hidden, std::move(channels), scale, shift, 1.0, 0});
          },
          py::arg("channels"), py::arg("scale"), py::arg("shift"))
      .def_property_readonly("hidden", [](const BlockModel& b) { return b.dims.hidden; })
      .def("forward", [](const BlockModel& b, const F64Array& x) { return to_array(forward(b, to_mat(x))); })
      .def(
          "calibrate",
          [](const BlockModel& b, const F64Array& x, std::size_t seq_len, double clip) {
            const auto c = calibrate_block(b, to_mat(x), seq_len, clip);
            return py::make_tuple(c.ln1, c.ln2);
          },
          py::arg("x"), py::arg("seq_len") = 16, py::arg("clip_ratio") = 1.0,
          "(ln1, ln2) statistics of the LayerNorm outputs.");

  py::class_<TransformedBlock>(m, "TransformedBlock")
      .def_static("load", [](const std::string& p) { return load_transformed(p); })
      .def("save", [](const TransformedBlock& t, const std::string& p) { save_transformed(p, t); })
      .def(
          "forward",
          [](const TransformedBlock& t, const F64Array& x, bool quantized) {
            OpCount c;
            const MatF y = t.forward(to_mat(x), quantized ? ExecMode::kQuantized : ExecMode::kBypass, &c);
            return py::make_tuple(to_array(y), op_dict(c));
          },
          py::arg("x"), py::arg("quantized") = true, "(output, op counts)")
      .def_property_readonly("ln1_z", [](const TransformedBlock& t) { return t.qkv.sym_z; })
      .def_property_readonly("ln2_z", [](const TransformedBlock& t) { return t.fc1.sym_z; })
      .def_property_readonly("qkv_codes", [](const TransformedBlock& t) { return to_array(t.qkv.wsq.ints); });

  m.def(
      "transform",
      [](const BlockModel& b, const CalibStats& ln1, const CalibStats& ln2, int bits, bool symmetric_weights,
         int act_bits, bool symmetrize) {
        return transform_block(b, ln1, ln2, scheme(bits, symmetric_weights, "per_channel"),
                               scheme(act_bits == 0 ? bits : act_bits, true, "per_channel"), symmetrize);
      },
      py::arg("model"), py::arg("ln1"), py::arg("ln2"), py::arg("bits") = 8, py::arg("symmetric_weights") = true,
      py::arg("act_bits") = 0, py::arg("symmetrize") = true);

  m.def(
      "run_experiment",
      [](const std::string& suite, std::uint64_t seed) {
        if (suite == "ablation") return to_py(run_ablation(default_ablation_config(seed)).to_json());
        if (suite == "opcount") return to_py(run_opcount_check(parse_shapes("1x1x1,8x16x4"), seed).to_json());
        throw ContractError("unknown suite '" + suite + "' (ablation, opcount)");
      },
      py::arg("suite"), py::arg("seed") = 0);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> all{"otune"};
        all.insert(all.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : all) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the otune command line in-process: (exit code, stdout, stderr).");
}
