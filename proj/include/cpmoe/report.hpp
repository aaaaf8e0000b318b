#pragma once

// Markdown summary tables rendered from the summary.json artifacts under a
// run directory. Output is byte-stable: files are scanned in sorted order and
// all numbers use fixed formatting.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpmoe/numerics.hpp"

namespace cpmoe {

struct SeedSummary {
  uint64_t seed = 0;
  double ap = 0.0;
  double af = 0.0;
  double zst = 0.0;
  bool has_zst = false;
};

struct VariantSummary {
  std::string variant;
  std::vector<SeedSummary> seeds;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

// Sample standard deviation; 0 for a single observation.
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

inline std::vector<VariantSummary> collect_summaries(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(run_dir)) throw IoError("report: directory '" + run_dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir))
    if (entry.is_regular_file() && entry.path().filename() == "summary.json")
      files.push_back(entry.path());
  if (files.empty()) throw IoError("report: no summary.json files under '" + run_dir + "'");
  std::sort(files.begin(), files.end());

  std::map<std::string, VariantSummary> by_variant;
  for (const auto& path : files) {
    std::ifstream in(path);
    if (!in) throw IoError("report: cannot open '" + path.string() + "'");
    nlohmann::json j;
    in >> j;
    SeedSummary s;
    s.seed = j.at("seed").get<uint64_t>();
    s.ap = j.at("ap").get<double>();
    s.af = j.at("af").get<double>();
    if (j.contains("zst") && !j.at("zst").is_null()) {
      s.zst = j.at("zst").get<double>();
      s.has_zst = true;
    }
    const std::string variant = j.at("variant").get<std::string>();
    auto& bucket = by_variant[variant];
    bucket.variant = variant;
    bucket.seeds.push_back(s);
  }
  std::vector<VariantSummary> out;
  for (auto& [name, v] : by_variant) {
    std::sort(v.seeds.begin(), v.seeds.end(),
              [](const SeedSummary& a, const SeedSummary& b) { return a.seed < b.seed; });
    out.push_back(std::move(v));
  }
  return out;
}

inline std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string render_report(const std::string& run_dir) {
  const auto variants = collect_summaries(run_dir);
  std::string out = "# cpmoe run report\n";
  for (const auto& v : variants) {
    out += "\n## variant `" + v.variant + "`\n\n";
    out += "| seed | AP | AF | ZST |\n|---:|---:|---:|---:|\n";
    std::vector<double> aps, afs, zsts;
    for (const auto& s : v.seeds) {
      out += "| " + std::to_string(s.seed) + " | " + fmt4(s.ap) + " | " + fmt4(s.af) + " | " +
             (s.has_zst ? fmt4(s.zst) : std::string("-")) + " |\n";
      aps.push_back(s.ap);
      afs.push_back(s.af);
      if (s.has_zst) zsts.push_back(s.zst);
    }
    out += "| mean ± std | " + fmt4(mean_of(aps)) + " ± " + fmt4(std_of(aps)) + " | " +
           fmt4(mean_of(afs)) + " ± " + fmt4(std_of(afs)) + " | " +
           (zsts.empty() ? std::string("-")
                         : fmt4(mean_of(zsts)) + " ± " + fmt4(std_of(zsts))) +
           " |\n";
  }
  if (variants.size() > 1) {
    out += "\n## ablation comparison\n\n";
    out += "| variant | AP mean ± std | AF mean ± std | ZST mean ± std |\n";
    out += "|:--|---:|---:|---:|\n";
    for (const auto& v : variants) {
      std::vector<double> aps, afs, zsts;
      for (const auto& s : v.seeds) {
        aps.push_back(s.ap);
        afs.push_back(s.af);
        if (s.has_zst) zsts.push_back(s.zst);
      }
      out += "| `" + v.variant + "` | " + fmt4(mean_of(aps)) + " ± " + fmt4(std_of(aps)) +
             " | " + fmt4(mean_of(afs)) + " ± " + fmt4(std_of(afs)) + " | " +
             (zsts.empty() ? std::string("-")
                           : fmt4(mean_of(zsts)) + " ± " + fmt4(std_of(zsts))) +
             " |\n";
    }
  }
  return out;
}

}  // namespace cpmoe
