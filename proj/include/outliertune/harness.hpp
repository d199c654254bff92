#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "outliertune/block.hpp"
#include "outliertune/qgemm.hpp"
#include "outliertune/quant.hpp"
#include "outliertune/report.hpp"
#include "outliertune/transform.hpp"

namespace otune {

// Seed streams, so that one user seed drives independent generators.
inline constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;  // "model"
inline constexpr std::uint64_t kDataStream = 0x64617461ULL;     // "data"

// Structured outlier channels. As activation data: normal channels ~ N(0, base_std^2),
// outlier channels ~ N(outlier_shift, (base_std * outlier_scale)^2). Injected into a
// block: both LayerNorms get gamma_k = base_std * outlier_scale, beta_k = outlier_shift.
struct OutlierSpec {
  std::size_t n_channels = 64;
  std::vector<std::size_t> outlier_indices;
  double outlier_scale = 1.0;
  double outlier_shift = 0.0;
  double base_std = 1.0;
  std::uint64_t seed = 0;

  // Throws ContractError on out-of-range or duplicate indices, scale < 1, base_std <= 0.
  void validate() const;
  bool operator==(const OutlierSpec&) const = default;
};

nlohmann::json to_json(const OutlierSpec& s);
OutlierSpec outlier_spec_from_json(const nlohmann::json& j);

// Deterministic in spec.seed. Throws DomainError when rows == 0.
MatF gen_activations(const OutlierSpec& spec, std::size_t rows);

// Writes the spec's outlier channels into ln1 and ln2.
void inject_outliers(BlockModel& m, const OutlierSpec& spec);

// Block inputs: N(0, std^2), rows = tokens.
MatF gen_inputs(std::size_t rows, std::size_t cols, double std, std::uint64_t seed);

// Runs the block on consecutive seq_len-row sequences (the last may be shorter).
MatF run_sequences(const BlockOps& ops, const MatF& x, std::size_t seq_len,
                   BlockTrace* trace = nullptr);

struct BlockCalibration {
  CalibStats ln1, ln2;
};

// Min/max of the raw LayerNorm outputs of the FP model over x.
BlockCalibration calibrate_block(const BlockModel& m, const MatF& x, std::size_t seq_len,
                                 double clip_ratio = 1.0);

// How the four linear layers are quantized.
enum class Pipeline {
  kPerTensor,      // dynamic per-tensor activations x per-tensor weights
  kPerToken,       // dynamic per-token activations x per-channel weights, no transform
  kChannelNaive,   // static per-channel activations, scales applied inside the reduction
  kChannelFolded   // OutlierTune: symmetrized, scales folded into the weights
};

std::string_view to_string(Pipeline p);
Pipeline parse_pipeline(std::string_view s);

struct SchemeEntry {
  Pipeline pipeline = Pipeline::kChannelFolded;
  int bits = 8;
  Symmetry weight_symmetry = Symmetry::kSymmetric;

  QScheme weight_scheme() const;
  QScheme activation_scheme() const;
  std::string label() const;  // e.g. "channel_folded/int8/wsym"
};

nlohmann::json to_json(const SchemeEntry& e);
SchemeEntry scheme_entry_from_json(const nlohmann::json& j);

enum class LayerId { kQkv = 0, kOut = 1, kFc1 = 2, kFc2 = 3 };
std::string_view to_string(LayerId l);

// A quantized block ready to run; holds its own state.
class PreparedPipeline {
 public:
  PreparedPipeline(const SchemeEntry& entry, const BlockModel& model, const BlockCalibration& cal,
                   bool symmetrize);

  const SchemeEntry& entry() const noexcept { return entry_; }
  BlockOps ops(OpCount* count = nullptr) const;
  // One quantized linear layer applied to its FP-model input (raw LayerNorm output for
  // qkv/fc1).
  MatF layer(LayerId id, const MatF& x, OpCount* count = nullptr) const;

 private:
  struct State;
  SchemeEntry entry_;
  std::shared_ptr<const State> state_;
};

struct ExperimentConfig {
  BlockDims dims;
  ResidualTap residual = ResidualTap::kPreNorm;
  OutlierSpec outliers;  // injected into the LayerNorms; base_std also sets input std
  std::vector<SchemeEntry> schemes;
  std::size_t calib_rows = 512;
  std::size_t eval_rows = 2048;
  std::size_t seq_len = 16;
  bool symmetrize = true;
  double clip_ratio = 1.0;
  std::uint64_t seed = 0;  // model and calibration data use seed, eval data seed + 1

  // Throws ContractError on an empty scheme list, zero row counts, or a bad spec.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// The model, calibration and eval data a config describes.
struct ExperimentSetup {
  BlockModel model;
  MatF calib_x, eval_x;
  BlockCalibration calibration;
};
ExperimentSetup setup_experiment(const ExperimentConfig& cfg);

struct PipelineMetrics {
  ErrorMetrics output;
  double max_rel_err = 0.0;            // max |y - y_fp| / max |y_fp|
  double rel_frobenius = 0.0;          // ||y - y_fp||_F / ||y_fp||_F
  std::vector<ErrorMetrics> layers;    // indexed by LayerId, FP inputs
  OpCount ops;                         // summed over the eval forward pass
  std::uint64_t wall_ns = 0;
};

nlohmann::json to_json(const PipelineMetrics& m);

PipelineMetrics evaluate_pipeline(const PreparedPipeline& p, const BlockModel& fp_model,
                                  const MatF& eval_x, std::size_t seq_len);

// Activation-only quantization error of one matrix under each axis (symmetric, dynamic).
struct AxisErrors {
  ErrorMetrics per_tensor, per_token, per_channel;
};
AxisErrors activation_axis_errors(const MatF& x, int bits);

// Block metrics for every scheme, plus activation-level axis errors on
// gen_activations(cfg.outliers). results.ordering reports the checked relations.
Report run_scheme_comparison(const ExperimentConfig& cfg);

// Names of the ordering checks in a comparison report that came out false.
std::vector<std::string> ordering_violations(const Report& r);

// Each scheme (must be channel_naive or channel_folded) with symmetrization on and off.
struct AblationRow {
  SchemeEntry entry;
  double mse_on = 0.0, mse_off = 0.0;
};
std::vector<AblationRow> ablation_rows(const ExperimentConfig& cfg);
Report run_ablation(const ExperimentConfig& cfg);

// One outlier channel (5) with gamma 12, beta -75 on both LayerNorms; Int8 with
// asymmetric weights and Int6 with symmetric weights, folded pipeline.
ExperimentConfig default_ablation_config(std::uint64_t seed);

struct GemmShape {
  std::size_t i = 1, n = 1, j = 1;
};
std::vector<GemmShape> parse_shapes(std::string_view s);  // "8x16x4,1x1x1"

// Runs naive and folded kernels on random codes of each shape; results.all_ok is true
// when naive - folded scale multiplies == i*j*n and every count matches its closed form.
Report run_opcount_check(const std::vector<GemmShape>& shapes, std::uint64_t seed);

// Median wall time of `repeats` runs of every variant per shape.
Report run_bench(const std::vector<GemmShape>& shapes, std::size_t repeats, std::uint64_t seed);

// Random quantized operands for a variant (for tests and benches).
struct GemmOperands {
  QTensor x, w;
};
GemmOperands random_operands(GemmVariant v, const GemmShape& s, int bits, bool asymmetric_weights,
                             std::uint64_t seed);

}  // namespace otune
