#pragma once

// Experiment configuration: a sectioned key=value file with documented
// defaults for every field. Unknown keys are rejected with the offending key
// and line; the resolved configuration echoes back to text that re-parses to
// the identical configuration.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpmoe/model.hpp"
#include "cpmoe/numerics.hpp"
#include "cpmoe/trainer.hpp"

namespace cpmoe {

struct TaskgenConfig {
  int dim = 32;
  int classes = 4;
  int seen_tasks = 8;
  int unseen_tasks = 4;
  double noise = 0.15;
  int train_size = 512;
  int test_size = 256;

  void validate() const {
    if (dim < 2 || classes < 2) throw ConfigError("taskgen: dim >= 2 and classes >= 2 required");
    if (seen_tasks < 1 || unseen_tasks < 0) throw ConfigError("taskgen: bad task counts");
    if (train_size < classes || test_size < classes)
      throw ConfigError("taskgen: train/test sizes must be >= classes");
    if (noise < 0.0) throw ConfigError("taskgen: noise must be >= 0");
  }
};

struct RunConfig {
  std::string out_dir = "runs/out";
  std::vector<uint64_t> seeds = {1};
  int stop_after_task = 0;  // 0 = run the whole stream
};

struct ExperimentConfig {
  ModelConfig model;
  TaskgenConfig taskgen;
  TrainerConfig trainer;
  AblationSwitches ablation;
  RunConfig run;

  void validate() const {
    model.validate();
    taskgen.validate();
    trainer.validate();
    if (model.d_in != taskgen.dim)
      throw ConfigError("config: model.d_in must equal taskgen.dim");
    if (model.n_classes != taskgen.classes)
      throw ConfigError("config: model.n_classes must equal taskgen.classes");
    if (model.warmup_samples > taskgen.train_size)
      throw ConfigError("config: warmup_samples cannot exceed taskgen.train_size");
    if (model.warmup_batch > model.warmup_samples)
      throw ConfigError("config: warmup_batch cannot exceed warmup_samples");
    if (run.seeds.empty()) throw ConfigError("config: at least one seed required");
    if (run.stop_after_task < 0 || run.stop_after_task > taskgen.seen_tasks)
      throw ConfigError("config: stop_after_task out of range");
  }

  std::string echo() const;
  static ExperimentConfig parse(const std::string& text, const std::string& origin);
  static ExperimentConfig load(const std::string& path);
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long parse_int(const std::string& v, const std::string& key, int line,
                           const std::string& origin) {
  try {
    size_t pos = 0;
    long long out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key +
                      "' expects an integer, got '" + v + "'");
  }
}

inline double parse_float(const std::string& v, const std::string& key, int line,
                          const std::string& origin) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key +
                      "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key, int line,
                       const std::string& origin) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key +
                    "' expects on/off, got '" + v + "'");
}

inline std::vector<uint64_t> parse_seed_list(const std::string& v, const std::string& key,
                                             int line, const std::string& origin) {
  std::vector<uint64_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    out.push_back(static_cast<uint64_t>(parse_int(tok, key, line, origin)));
  }
  if (out.empty())
    throw ConfigError(origin + ":" + std::to_string(line) + ": key '" + key +
                      "' expects a comma-separated seed list");
  return out;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::parse(const std::string& text,
                                                const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    line_no++;
    std::string line = detail::trim(raw);
    const size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = detail::trim(line.substr(0, comment));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "taskgen" && section != "trainer" &&
          section != "ablation" && section != "run")
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown section '" +
                          section + "'");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;

    auto as_int = [&](auto& dst) { dst = static_cast<std::decay_t<decltype(dst)>>(
                                       detail::parse_int(value, full, line_no, origin)); };
    auto as_float = [&](double& dst) { dst = detail::parse_float(value, full, line_no, origin); };
    auto as_bool = [&](bool& dst) { dst = detail::parse_bool(value, full, line_no, origin); };

    if (full == "model.d_in") as_int(cfg.model.d_in);
    else if (full == "model.d_hidden") as_int(cfg.model.d_hidden);
    else if (full == "model.n_classes") as_int(cfg.model.n_classes);
    else if (full == "model.n_experts") as_int(cfg.model.n_experts);
    else if (full == "model.expert_rank") as_int(cfg.model.expert_rank);
    else if (full == "model.top_k") as_int(cfg.model.top_k);
    else if (full == "model.lora_scale") as_float(cfg.model.lora_scale);
    else if (full == "model.lora_dropout") as_float(cfg.model.lora_dropout);
    else if (full == "model.cp_bias_strength") as_float(cfg.model.cp_bias_strength);
    else if (full == "model.lambda") as_float(cfg.model.lambda);
    else if (full == "model.gamma") as_float(cfg.model.gamma);
    else if (full == "model.warmup_lr") as_float(cfg.model.warmup_lr);
    else if (full == "model.warmup_samples") as_int(cfg.model.warmup_samples);
    else if (full == "model.warmup_batch") as_int(cfg.model.warmup_batch);
    else if (full == "model.damping") as_float(cfg.model.damping);
    else if (full == "model.backbone_scale") as_float(cfg.model.backbone_scale);
    else if (full == "model.router_scale") as_float(cfg.model.router_scale);
    else if (full == "taskgen.dim") as_int(cfg.taskgen.dim);
    else if (full == "taskgen.classes") as_int(cfg.taskgen.classes);
    else if (full == "taskgen.seen_tasks") as_int(cfg.taskgen.seen_tasks);
    else if (full == "taskgen.unseen_tasks") as_int(cfg.taskgen.unseen_tasks);
    else if (full == "taskgen.noise") as_float(cfg.taskgen.noise);
    else if (full == "taskgen.train_size") as_int(cfg.taskgen.train_size);
    else if (full == "taskgen.test_size") as_int(cfg.taskgen.test_size);
    else if (full == "trainer.epochs") as_int(cfg.trainer.epochs);
    else if (full == "trainer.batch_size") as_int(cfg.trainer.batch_size);
    else if (full == "trainer.base_lr") as_float(cfg.trainer.base_lr);
    else if (full == "trainer.weight_decay") as_float(cfg.trainer.weight_decay);
    else if (full == "ablation.cp_bias") as_bool(cfg.ablation.cp_bias);
    else if (full == "ablation.te_reg") as_bool(cfg.ablation.te_reg);
    else if (full == "ablation.cka_weighting") as_bool(cfg.ablation.cka_weighting);
    else if (full == "run.out_dir") cfg.run.out_dir = value;
    else if (full == "run.seeds") cfg.run.seeds = detail::parse_seed_list(value, full, line_no, origin);
    else if (full == "run.stop_after_task") as_int(cfg.run.stop_after_task);
    else
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown key '" + full + "'");
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

inline std::string ExperimentConfig::echo() const {
  std::ostringstream out;
  auto b = [](bool v) { return v ? "on" : "off"; };
  out << "[model]\n";
  out << "d_in = " << model.d_in << "\n";
  out << "d_hidden = " << model.d_hidden << "\n";
  out << "n_classes = " << model.n_classes << "\n";
  out << "n_experts = " << model.n_experts << "\n";
  out << "expert_rank = " << model.expert_rank << "\n";
  out << "top_k = " << model.top_k << "\n";
  out << "lora_scale = " << format_double(model.lora_scale) << "\n";
  out << "lora_dropout = " << format_double(model.lora_dropout) << "\n";
  out << "cp_bias_strength = " << format_double(model.cp_bias_strength) << "\n";
  out << "lambda = " << format_double(model.lambda) << "\n";
  out << "gamma = " << format_double(model.gamma) << "\n";
  out << "warmup_lr = " << format_double(model.warmup_lr) << "\n";
  out << "warmup_samples = " << model.warmup_samples << "\n";
  out << "warmup_batch = " << model.warmup_batch << "\n";
  out << "damping = " << format_double(model.damping) << "\n";
  out << "backbone_scale = " << format_double(model.backbone_scale) << "\n";
  out << "router_scale = " << format_double(model.router_scale) << "\n";
  out << "\n[taskgen]\n";
  out << "dim = " << taskgen.dim << "\n";
  out << "classes = " << taskgen.classes << "\n";
  out << "seen_tasks = " << taskgen.seen_tasks << "\n";
  out << "unseen_tasks = " << taskgen.unseen_tasks << "\n";
  out << "noise = " << format_double(taskgen.noise) << "\n";
  out << "train_size = " << taskgen.train_size << "\n";
  out << "test_size = " << taskgen.test_size << "\n";
  out << "\n[trainer]\n";
  out << "epochs = " << trainer.epochs << "\n";
  out << "batch_size = " << trainer.batch_size << "\n";
  out << "base_lr = " << format_double(trainer.base_lr) << "\n";
  out << "weight_decay = " << format_double(trainer.weight_decay) << "\n";
  out << "\n[ablation]\n";
  out << "cp_bias = " << b(ablation.cp_bias) << "\n";
  out << "te_reg = " << b(ablation.te_reg) << "\n";
  out << "cka_weighting = " << b(ablation.cka_weighting) << "\n";
  out << "\n[run]\n";
  out << "out_dir = " << run.out_dir << "\n";
  out << "seeds = ";
  for (size_t i = 0; i < run.seeds.size(); ++i) out << (i ? "," : "") << run.seeds[i];
  out << "\n";
  out << "stop_after_task = " << run.stop_after_task << "\n";
  return out.str();
}

inline std::string variant_label(const AblationSwitches& sw) {
  std::string label;
  if (!sw.cp_bias) label += label.empty() ? "no_cp_bias" : "+no_cp_bias";
  if (!sw.te_reg) label += label.empty() ? "no_te_reg" : "+no_te_reg";
  if (!sw.cka_weighting) label += label.empty() ? "no_cka_weighting" : "+no_cka_weighting";
  return label.empty() ? "full" : label;
}

}  // namespace cpmoe
