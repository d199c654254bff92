#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"

namespace otune {

inline constexpr int kReportSchema = 1;

std::string_view version() noexcept;

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::string hex64(std::uint64_t v);

struct Report {
  nlohmann::json config;   // the exact configuration that produced results
  std::uint64_t seed = 0;
  nlohmann::json results;

  // {"schema":1,"metadata":{"config_hash","seed","version"},"config","results"}.
  // config_hash is FNV-1a over config.dump().
  nlohmann::json to_json() const;
  // Throws FormatError on schema mismatch or missing fields.
  static Report from_json(const nlohmann::json& j);
};

// Deep copy with every object key named "timing" or starting with "wall_ns" removed.
nlohmann::json strip_timing(const nlohmann::json& j);

// Flattens leaves to "path,value" lines (path segments joined with '.', array
// indices as numbers), header "key,value".
std::string to_csv(const nlohmann::json& j);

// Finite doubles as numbers, infinities as "+inf"/"-inf".
nlohmann::json json_number(double v);

}  // namespace otune
