#pragma once
// CLI runs whose timing-free reports are pinned under tests/golden. Set
// OTUNE_UPDATE_GOLDEN=1 to rewrite the files instead of comparing.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "outliertune/cli.hpp"
#include "outliertune/report.hpp"

namespace otune::golden {

struct Case {
  std::string name;
  std::vector<std::string> args;  // "{dir}" expands to the scratch directory
};

// Order matters: later cases read files written by earlier ones.
inline std::vector<Case> cases() {
  return {
      {"gen_model", {"gen-model", "--seed", "42", "--out", "{dir}/m.otun", "--outlier-channels", "5",
                     "--outlier-scale", "12", "--outlier-shift", "-75"}},
      {"gen_model_f32", {"gen-model", "--seed", "42", "--out", "{dir}/m32.otun", "--f32"}},
      {"calibrate", {"calibrate", "--model", "{dir}/m.otun", "--seed", "7", "--out", "{dir}/c.json", "--rows", "128"}},
      {"transform_w8", {"transform", "--model", "{dir}/m.otun", "--stats", "{dir}/c.json", "--out", "{dir}/t8.otun"}},
      {"transform_w6_asym", {"transform", "--model", "{dir}/m.otun", "--stats", "{dir}/c.json", "--out",
                             "{dir}/t6.otun", "--bits", "6", "--asymmetric"}},
      {"eval_w8", {"eval", "--model", "{dir}/m.otun", "--transformed", "{dir}/t8.otun", "--seed", "9", "--rows", "128"}},
      {"eval_bypass", {"eval", "--model", "{dir}/m.otun", "--transformed", "{dir}/t6.otun", "--seed", "9", "--rows",
                       "64", "--no-quant"}},
      {"opcount", {"experiment", "--suite", "opcount", "--seed", "3", "--shapes", "1x1x1,8x16x4,5x7x3"}},
      {"eval_csv", {"eval", "--model", "{dir}/m.otun", "--seed", "9", "--rows", "32", "--format", "csv"}},
  };
}

struct Outcome {
  std::string name;
  bool ok = false;
  std::string detail;
};

inline std::string expand(const std::string& a, const std::filesystem::path& dir) {
  std::string s = a;
  const std::string key = "{dir}";
  for (auto p = s.find(key); p != std::string::npos; p = s.find(key)) s.replace(p, key.size(), dir.string());
  return s;
}

// The comparable form of a report: JSON minus timing, or CSV minus timing rows.
inline std::string canonical(const std::string& out) {
  if (!out.empty() && out[0] == '{') return strip_timing(nlohmann::json::parse(out)).dump(2) + "\n";
  std::istringstream in(out);
  std::string line, kept;
  while (std::getline(in, line))
    if (line.find("timing") == std::string::npos && line.find("wall_ns") == std::string::npos) kept += line + "\n";
  return kept;
}

inline std::vector<Outcome> run_all(const std::filesystem::path& golden_dir) {
  const bool update = std::getenv("OTUNE_UPDATE_GOLDEN") != nullptr;
  const auto dir = std::filesystem::temp_directory_path() / ("otune_golden_" + std::to_string(std::random_device{}()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::vector<Outcome> res;
  for (const auto& c : cases()) {
    std::vector<std::string> args{"otune"};
    for (const auto& a : c.args) args.push_back(expand(a, dir));
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    Outcome o{c.name};
    if (code != kExitOk) {
      o.detail = "exit " + std::to_string(code) + ": " + err.str();
      res.push_back(o);
      continue;
    }
    const std::string got = canonical(out.str());
    const auto file = golden_dir / (c.name + (got[0] == '{' ? ".json" : ".csv"));
    if (update) {
      std::ofstream(file, std::ios::binary) << got;
      o.ok = true;
      o.detail = "updated";
    } else {
      std::ifstream f(file, std::ios::binary);
      const std::string want{std::istreambuf_iterator<char>(f), {}};
      o.ok = !want.empty() && want == got;
      if (!o.ok) o.detail = want.empty() ? "missing " + file.string() : "differs from " + file.string();
    }
    res.push_back(o);
  }
  std::filesystem::remove_all(dir);
  return res;
}

}  // namespace otune::golden
