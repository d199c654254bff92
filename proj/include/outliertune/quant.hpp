#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "outliertune/tensor.hpp"

namespace otune {

enum class Symmetry { kSymmetric, kAsymmetric };

// Which dimension shares a scale: whole tensor, each row (token), or each column (channel).
enum class Axis { kPerTensor, kPerToken, kPerChannel };

std::string_view to_string(Symmetry s);
std::string_view to_string(Axis a);
Axis parse_axis(std::string_view s);

struct QScheme {
  int bits = 8;
  Symmetry symmetry = Symmetry::kSymmetric;
  Axis axis = Axis::kPerTensor;

  // Throws ContractError unless bits is 4, 6 or 8.
  void validate() const;

  bool symmetric() const noexcept { return symmetry == Symmetry::kSymmetric; }

  // Logical code range: [-(2^(b-1)-1), 2^(b-1)-1] symmetric, [0, 2^b-1] asymmetric.
  std::int32_t code_min() const noexcept;
  std::int32_t code_max() const noexcept;

  // Asymmetric codes are stored as code - 2^(b-1) so 8-bit payloads fit in int8.
  std::int32_t storage_offset() const noexcept;

  bool operator==(const QScheme&) const = default;
};

nlohmann::json to_json(const QScheme& s);
QScheme scheme_from_json(const nlohmann::json& j);

struct ScaleParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
};

// Scale and zero point for the range [min, max]. A channel with min == max == 0 gets
// scale 1 and zero point 0. Throws DomainError when max < min or either is NaN.
ScaleParams compute_scale(double min, double max, const QScheme& scheme);

// Round half away from zero.
inline double round_half_away(double v) noexcept { return std::round(v); }

class CalibStats;

struct QTensor {
  MatI8 ints;  // storage codes (logical code - storage_offset)
  QScheme scheme;
  std::vector<double> scales;
  std::vector<std::int32_t> zero_points;  // logical domain

  std::size_t rows() const noexcept { return ints.rows(); }
  std::size_t cols() const noexcept { return ints.cols(); }

  // Index into scales/zero_points for element (r, c).
  std::size_t param_index(std::size_t r, std::size_t c) const noexcept;

  std::int32_t code(std::size_t r, std::size_t c) const noexcept {
    return static_cast<std::int32_t>(ints(r, c)) + scheme.storage_offset();
  }

  // Zero point expressed in the storage domain.
  std::int32_t storage_zero(std::size_t idx) const noexcept {
    return zero_points[idx] - scheme.storage_offset();
  }

  // Throws ContractError on any broken invariant (scale count, positivity, code range).
  void validate() const;
};

// Scale count implied by an axis for a rows x cols matrix.
std::size_t param_count(Axis axis, std::size_t rows, std::size_t cols);

// Dynamic quantization: parameters from x itself.
QTensor quantize(const MatF& x, const QScheme& scheme);
// Static quantization: parameters from calibration stats (per-channel or per-tensor only).
QTensor quantize(const MatF& x, const QScheme& scheme, const CalibStats& stats);
// Quantization with precomputed parameters.
QTensor quantize_with_params(const MatF& x, const QScheme& scheme, std::vector<double> scales,
                             std::vector<std::int32_t> zero_points);

MatF dequantize(const QTensor& q);

// dequantize(quantize(x, scheme)).
MatF fake_quantize(const MatF& x, const QScheme& scheme);

// Per-channel running min/max. Mergeable: merge is elementwise min/max and a count sum.
class CalibStats {
 public:
  explicit CalibStats(std::size_t channels = 0, double clip_ratio = 1.0);

  std::size_t channels() const noexcept { return min_.size(); }
  const std::vector<double>& min() const noexcept { return min_; }
  const std::vector<double>& max() const noexcept { return max_; }
  std::uint64_t count() const noexcept { return count_; }
  double clip_ratio() const noexcept { return clip_ratio_; }
  bool empty() const noexcept { return count_ == 0; }

  // Folds a batch (rows = tokens, cols = channels) into the running range. With
  // clip_ratio < 1 each row is first clamped to +-q, q being the clip_ratio quantile
  // of the row's absolute values.
  void observe(const MatF& batch);
  void merge(const CalibStats& other);

  nlohmann::json to_json() const;
  static CalibStats from_json(const nlohmann::json& j);

  bool operator==(const CalibStats&) const = default;

 private:
  std::vector<double> min_;
  std::vector<double> max_;
  std::uint64_t count_ = 0;
  double clip_ratio_ = 1.0;
};

CalibStats observe(CalibStats stats, const MatF& batch);
CalibStats merge(CalibStats a, const CalibStats& b);

// Quantile of |values| at p in (0, 1], linear interpolation at position p * (m - 1)
// between order statistics.
double abs_quantile(std::span<const double> values, double p);

struct ErrorMetrics {
  double mse = 0.0;
  double sqnr_db = 0.0;  // +inf when mse == 0 or the signal is all zero
  double max_abs_err = 0.0;
};

// Error of approx against ref.
ErrorMetrics error_metrics(const MatF& ref, const MatF& approx);
// Error of fake_quantize(x, scheme) against x.
ErrorMetrics quant_error(const MatF& x, const QScheme& scheme);

nlohmann::json to_json(const ErrorMetrics& m);

}  // namespace otune
