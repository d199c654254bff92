#include "outliertune/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace otune {

namespace {

constexpr double kAsymWidthFloor = 1e-12;

void check_clip_ratio(double r) {
  if (!(r > 0.0 && r <= 1.0)) throw DomainError("clip_ratio must lie in (0, 1]");
}

}  // namespace

std::string_view to_string(Symmetry s) {
  return s == Symmetry::kSymmetric ? "symmetric" : "asymmetric";
}

std::string_view to_string(Axis a) {
  switch (a) {
    case Axis::kPerTensor:
      return "per_tensor";
    case Axis::kPerToken:
      return "per_token";
    case Axis::kPerChannel:
      return "per_channel";
  }
  return "?";
}

Axis parse_axis(std::string_view s) {
  if (s == "per_tensor" || s == "tensor") return Axis::kPerTensor;
  if (s == "per_token" || s == "token") return Axis::kPerToken;
  if (s == "per_channel" || s == "channel") return Axis::kPerChannel;
  throw ContractError("unknown axis '" + std::string(s) + "'");
}

void QScheme::validate() const {
  if (bits != 4 && bits != 6 && bits != 8)
    throw ContractError("unsupported bit width " + std::to_string(bits));
}

std::int32_t QScheme::code_min() const noexcept {
  return symmetric() ? -((1 << (bits - 1)) - 1) : 0;
}

std::int32_t QScheme::code_max() const noexcept {
  return symmetric() ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

std::int32_t QScheme::storage_offset() const noexcept {
  return symmetric() ? 0 : 1 << (bits - 1);
}

nlohmann::json to_json(const QScheme& s) {
  return {{"bits", s.bits}, {"symmetry", to_string(s.symmetry)}, {"axis", to_string(s.axis)}};
}

QScheme scheme_from_json(const nlohmann::json& j) {
  QScheme s;
  s.bits = j.at("bits").get<int>();
  const auto sym = j.at("symmetry").get<std::string>();
  if (sym != "symmetric" && sym != "asymmetric") throw ContractError("unknown symmetry '" + sym + "'");
  s.symmetry = sym == "asymmetric" ? Symmetry::kAsymmetric : Symmetry::kSymmetric;
  s.axis = parse_axis(j.at("axis").get<std::string>());
  s.validate();
  return s;
}

ScaleParams compute_scale(double min, double max, const QScheme& scheme) {
  scheme.validate();
  if (std::isnan(min) || std::isnan(max)) throw DomainError("compute_scale: NaN bound");
  if (max < min) throw DomainError("compute_scale: max < min");
  if (min == 0.0 && max == 0.0) return {1.0, 0};

  if (scheme.symmetric()) {
    const double amax = std::max(std::abs(min), std::abs(max));
    return {amax / scheme.code_max(), 0};
  }
  // The integer grid must contain real zero, so the range is widened to include it.
  const double lo = std::min(min, 0.0);
  const double hi = std::max(max, 0.0);
  const double s = std::max(hi - lo, kAsymWidthFloor) / scheme.code_max();
  const double z = std::clamp(round_half_away(-lo / s), 0.0, static_cast<double>(scheme.code_max()));
  return {s, static_cast<std::int32_t>(z)};
}

std::size_t param_count(Axis axis, std::size_t rows, std::size_t cols) {
  switch (axis) {
    case Axis::kPerTensor:
      return 1;
    case Axis::kPerToken:
      return rows;
    case Axis::kPerChannel:
      return cols;
  }
  return 1;
}

std::size_t QTensor::param_index(std::size_t r, std::size_t c) const noexcept {
  switch (scheme.axis) {
    case Axis::kPerTensor:
      return 0;
    case Axis::kPerToken:
      return r;
    case Axis::kPerChannel:
      return c;
  }
  return 0;
}

void QTensor::validate() const {
  scheme.validate();
  const std::size_t n = param_count(scheme.axis, rows(), cols());
  if (scales.size() != n || zero_points.size() != n)
    throw ContractError("QTensor: expected " + std::to_string(n) + " scale parameters");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(scales[i] > 0.0) || !std::isfinite(scales[i]))
      throw ContractError("QTensor: non-positive scale");
    if (scheme.symmetric() && zero_points[i] != 0)
      throw ContractError("QTensor: symmetric scheme with nonzero zero point");
    if (zero_points[i] < scheme.code_min() || zero_points[i] > scheme.code_max())
      throw ContractError("QTensor: zero point outside code range");
  }
  const std::int32_t lo = scheme.code_min() - scheme.storage_offset();
  const std::int32_t hi = scheme.code_max() - scheme.storage_offset();
  for (std::int8_t v : ints.data()) {
    if (v < lo || v > hi) throw ContractError("QTensor: code outside clip range");
  }
}

QTensor quantize_with_params(const MatF& x, const QScheme& scheme, std::vector<double> scales,
                             std::vector<std::int32_t> zero_points) {
  scheme.validate();
  const std::size_t n = param_count(scheme.axis, x.rows(), x.cols());
  if (scales.size() != n || zero_points.size() != n)
    throw DimensionError("quantize: parameter count " + std::to_string(scales.size()) +
                         " for " + std::to_string(n) + " groups");

  for (std::size_t i = 0; i < n; ++i) {
    if (!(scales[i] > 0.0) || !std::isfinite(scales[i]))
      throw ContractError("quantize: scales must be positive and finite");
    if (zero_points[i] < scheme.code_min() || zero_points[i] > scheme.code_max() ||
        (scheme.symmetric() && zero_points[i] != 0))
      throw ContractError("quantize: zero point outside the scheme's range");
  }
  QTensor q{MatI8(x.rows(), x.cols()), scheme, std::move(scales), std::move(zero_points)};
  const double lo = scheme.code_min();
  const double hi = scheme.code_max();
  const std::int32_t off = scheme.storage_offset();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (!std::isfinite(x(r, c))) throw DomainError("quantize: non-finite input");
      const std::size_t p = q.param_index(r, c);
      const double code =
          std::clamp(round_half_away(x(r, c) / q.scales[p]) + q.zero_points[p], lo, hi);
      q.ints(r, c) = static_cast<std::int8_t>(static_cast<std::int32_t>(code) - off);
    }
  }
  return q;
}

QTensor quantize(const MatF& x, const QScheme& scheme) {
  scheme.validate();
  if (x.empty()) throw DomainError("quantize: empty matrix");
  const std::size_t n = param_count(scheme.axis, x.rows(), x.cols());
  std::vector<double> lo(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (!std::isfinite(x(r, c))) throw DomainError("quantize: non-finite input");
      const std::size_t p =
          scheme.axis == Axis::kPerTensor ? 0 : (scheme.axis == Axis::kPerToken ? r : c);
      lo[p] = std::min(lo[p], x(r, c));
      hi[p] = std::max(hi[p], x(r, c));
    }
  }
  std::vector<double> scales(n);
  std::vector<std::int32_t> zps(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto sp = compute_scale(lo[i], hi[i], scheme);
    scales[i] = sp.scale;
    zps[i] = sp.zero_point;
  }
  return quantize_with_params(x, scheme, std::move(scales), std::move(zps));
}

QTensor quantize(const MatF& x, const QScheme& scheme, const CalibStats& stats) {
  scheme.validate();
  if (stats.empty()) throw DomainError("quantize: calibration stats are empty");
  if (stats.channels() != x.cols())
    throw DimensionError("quantize: stats cover " + std::to_string(stats.channels()) +
                         " channels, input has " + std::to_string(x.cols()));
  std::vector<double> scales;
  std::vector<std::int32_t> zps;
  switch (scheme.axis) {
    case Axis::kPerChannel:
      for (std::size_t c = 0; c < stats.channels(); ++c) {
        const auto sp = compute_scale(stats.min()[c], stats.max()[c], scheme);
        scales.push_back(sp.scale);
        zps.push_back(sp.zero_point);
      }
      break;
    case Axis::kPerTensor: {
      const auto sp = compute_scale(*std::min_element(stats.min().begin(), stats.min().end()),
                                    *std::max_element(stats.max().begin(), stats.max().end()),
                                    scheme);
      scales.push_back(sp.scale);
      zps.push_back(sp.zero_point);
      break;
    }
    case Axis::kPerToken:
      throw ContractError("quantize: per-token scales cannot come from channel statistics");
  }
  return quantize_with_params(x, scheme, std::move(scales), std::move(zps));
}

MatF dequantize(const QTensor& q) {
  MatF out(q.rows(), q.cols());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) {
      const std::size_t p = q.param_index(r, c);
      out(r, c) = static_cast<double>(q.code(r, c) - q.zero_points[p]) * q.scales[p];
    }
  }
  return out;
}

MatF fake_quantize(const MatF& x, const QScheme& scheme) {
  return dequantize(quantize(x, scheme));
}

CalibStats::CalibStats(std::size_t channels, double clip_ratio)
    : min_(channels, std::numeric_limits<double>::infinity()),
      max_(channels, -std::numeric_limits<double>::infinity()),
      clip_ratio_(clip_ratio) {
  check_clip_ratio(clip_ratio);
}

double abs_quantile(std::span<const double> values, double p) {
  if (values.empty()) throw DomainError("abs_quantile: empty input");
  check_clip_ratio(p);
  std::vector<double> a(values.size());
  std::transform(values.begin(), values.end(), a.begin(), [](double v) { return std::abs(v); });
  const double pos = p * static_cast<double>(a.size() - 1);
  const auto lo_idx = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo_idx);
  std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(lo_idx), a.end());
  const double lo = a[lo_idx];
  if (frac == 0.0 || lo_idx + 1 >= a.size()) return lo;
  const double hi = *std::min_element(a.begin() + static_cast<std::ptrdiff_t>(lo_idx) + 1, a.end());
  return lo + frac * (hi - lo);
}

void CalibStats::observe(const MatF& batch) {
  if (batch.cols() != channels())
    throw DimensionError("observe: batch has " + std::to_string(batch.cols()) +
                         " channels, stats track " + std::to_string(channels()));
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto row = batch.row(r);
    double bound = std::numeric_limits<double>::infinity();
    if (clip_ratio_ < 1.0) bound = abs_quantile(row, clip_ratio_);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double v = std::clamp(row[c], -bound, bound);
      min_[c] = std::min(min_[c], v);
      max_[c] = std::max(max_[c], v);
    }
  }
  count_ += batch.rows();
}

void CalibStats::merge(const CalibStats& other) {
  if (other.channels() != channels()) throw DimensionError("merge: channel count mismatch");
  if (other.clip_ratio_ != clip_ratio_) throw ContractError("merge: clip_ratio mismatch");
  for (std::size_t c = 0; c < channels(); ++c) {
    min_[c] = std::min(min_[c], other.min_[c]);
    max_[c] = std::max(max_[c], other.max_[c]);
  }
  count_ += other.count_;
}

nlohmann::json CalibStats::to_json() const {
  // Untouched channels hold +-inf, which JSON cannot carry; they are written as null.
  auto finite_or_null = [](const std::vector<double>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (double x : v) arr.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json());
    return arr;
  };
  return {{"channels", channels()},
          {"min", finite_or_null(min_)},
          {"max", finite_or_null(max_)},
          {"count", count_},
          {"clip_ratio", clip_ratio_}};
}

CalibStats CalibStats::from_json(const nlohmann::json& j) {
  try {
    CalibStats s(j.at("channels").get<std::size_t>(), j.at("clip_ratio").get<double>());
    const auto& mn = j.at("min");
    const auto& mx = j.at("max");
    if (mn.size() != s.channels() || mx.size() != s.channels())
      throw FormatError("CalibStats JSON: min/max length != channels");
    for (std::size_t c = 0; c < s.channels(); ++c) {
      if (!mn[c].is_null()) s.min_[c] = mn[c].get<double>();
      if (!mx[c].is_null()) s.max_[c] = mx[c].get<double>();
      if (s.min_[c] > s.max_[c] && !(mn[c].is_null() && mx[c].is_null()))
        throw FormatError("CalibStats JSON: min > max");
    }
    s.count_ = j.at("count").get<std::uint64_t>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CalibStats JSON: ") + e.what());
  }
}

CalibStats observe(CalibStats stats, const MatF& batch) {
  stats.observe(batch);
  return stats;
}

CalibStats merge(CalibStats a, const CalibStats& b) {
  a.merge(b);
  return a;
}

ErrorMetrics error_metrics(const MatF& ref, const MatF& approx) {
  if (ref.rows() != approx.rows() || ref.cols() != approx.cols())
    throw DimensionError("error_metrics: shape mismatch");
  if (ref.empty()) throw DomainError("error_metrics: empty matrix");
  double err2 = 0.0, sig2 = 0.0, maxe = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = ref.data()[i] - approx.data()[i];
    err2 += d * d;
    sig2 += ref.data()[i] * ref.data()[i];
    maxe = std::max(maxe, std::abs(d));
  }
  const double n = static_cast<double>(ref.size());
  ErrorMetrics m;
  m.mse = err2 / n;
  m.max_abs_err = maxe;
  m.sqnr_db = (m.mse == 0.0 || sig2 == 0.0) ? std::numeric_limits<double>::infinity()
                                            : 10.0 * std::log10((sig2 / n) / m.mse);
  return m;
}

ErrorMetrics quant_error(const MatF& x, const QScheme& scheme) {
  return error_metrics(x, fake_quantize(x, scheme));
}

nlohmann::json to_json(const ErrorMetrics& m) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
    return v;
  };
  return {{"mse", m.mse}, {"sqnr_db", num(m.sqnr_db)}, {"max_abs_err", m.max_abs_err}};
}

}  // namespace otune
