#include "outliertune/report.hpp"

#include <cmath>
#include <cstdio>

#include "outliertune/errors.hpp"

namespace otune {

std::string_view version() noexcept { return OTUNE_VERSION; }

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

nlohmann::json Report::to_json() const {
  return {{"schema", kReportSchema},
          {"metadata",
           {{"config_hash", hex64(fnv1a64(config.dump()))}, {"seed", seed}, {"version", version()}}},
          {"config", config},
          {"results", results}};
}

Report Report::from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<int>() != kReportSchema) throw FormatError("report: unsupported schema");
    Report r{j.at("config"), j.at("metadata").at("seed").get<std::uint64_t>(), j.at("results")};
    if (j.at("metadata").at("config_hash").get<std::string>() != hex64(fnv1a64(r.config.dump())))
      throw FormatError("report: config_hash does not match config");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

nlohmann::json strip_timing(const nlohmann::json& j) {
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : j.items()) {
      if (k == "timing" || k.rfind("wall_ns", 0) == 0) continue;
      out[k] = strip_timing(v);
    }
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : j) out.push_back(strip_timing(v));
    return out;
  }
  return j;
}

namespace {

void flatten(const nlohmann::json& j, const std::string& path, std::string& out) {
  if (j.is_object() || j.is_array()) {
    if (j.empty()) {
      out += path + "," + j.dump() + "\n";
      return;
    }
    std::size_t i = 0;
    for (const auto& [k, v] : j.items()) {
      const std::string key = j.is_array() ? std::to_string(i) : k;
      flatten(v, path.empty() ? key : path + "." + key, out);
      ++i;
    }
    return;
  }
  std::string val = j.is_string() ? j.get<std::string>() : j.dump();
  if (val.find_first_of(",\"\n") != std::string::npos) {
    std::string q = "\"";
    for (char c : val) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    val = q + "\"";
  }
  out += path + "," + val + "\n";
}

}  // namespace

std::string to_csv(const nlohmann::json& j) {
  std::string out = "key,value\n";
  flatten(j, "", out);
  return out;
}

nlohmann::json json_number(double v) {
  if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
  return v;
}

}  // namespace otune
