#pragma once

// Experiment orchestration behind the CLI subcommands: seeded runs with their
// artifact set (manifest, step log, accuracy matrix, summary, expert load,
// checkpoint), the probe dump, and the parameter-count presets. Everything is
// a plain function so tests can drive it without a process boundary.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpmoe/checkpoint.hpp"
#include "cpmoe/config.hpp"
#include "cpmoe/metrics.hpp"
#include "cpmoe/model.hpp"
#include "cpmoe/report.hpp"
#include "cpmoe/taskgen.hpp"
#include "cpmoe/trainer.hpp"
#include "cpmoe/verification.hpp"

namespace cpmoe {

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory '" + path + "': " + ec.message());
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline nlohmann::json matrix_to_json(const AccuracyMatrix& m) {
  nlohmann::json j;
  j["format"] = "cpmoe-matrix-v1";
  j["n_seen"] = m.n_seen;
  j["n_unseen"] = m.n_unseen;
  nlohmann::json values = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int t = 0; t < m.n_seen; ++t) {
      if (m.filled[r][t])
        row.push_back(m.values[r][t]);
      else
        row.push_back(nullptr);
    }
    values.push_back(row);
  }
  j["values"] = values;
  return j;
}

inline nlohmann::json summary_to_json(uint64_t seed, const AblationSwitches& sw,
                                      const AccuracyMatrix& m) {
  nlohmann::json j;
  j["format"] = "cpmoe-summary-v1";
  j["seed"] = seed;
  j["variant"] = variant_label(sw);
  j["ablation"] = {{"cp_bias", sw.cp_bias},
                   {"te_reg", sw.te_reg},
                   {"cka_weighting", sw.cka_weighting}};
  j["n_seen"] = m.n_seen;
  j["n_unseen"] = m.n_unseen;
  j["ap"] = average_performance(m);
  j["af"] = average_forgetting(m);
  j["af_best_historical"] = average_forgetting_best_historical(m);
  if (m.n_unseen > 0)
    j["zst"] = zero_shot_transfer(m);
  else
    j["zst"] = nullptr;
  nlohmann::json final_column = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) final_column.push_back(m.values[r][m.n_seen - 1]);
  j["final_column"] = final_column;
  return j;
}

inline nlohmann::json stream_manifest(const TaskStream& s) {
  nlohmann::json j;
  j["format"] = "cpmoe-manifest-v1";
  j["dim"] = s.dim;
  j["classes"] = s.classes;
  j["noise"] = s.noise;
  j["master_seed"] = s.master_seed;
  j["stream_seed"] = s.stream_seed;
  auto dump_tasks = [](const std::vector<TaskData>& tasks) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : tasks)
      arr.push_back({{"task_id", t.spec.task_id},
                     {"angle", t.spec.angle},
                     {"train_size", t.spec.train_size},
                     {"test_size", t.spec.test_size},
                     {"oracle_test_accuracy", t.oracle_test_accuracy}});
    return arr;
  };
  j["seen"] = dump_tasks(s.seen);
  j["unseen"] = dump_tasks(s.unseen);
  return j;
}

inline TaskStream stream_for(const ExperimentConfig& cfg, uint64_t seed) {
  return make_stream(cfg.taskgen.dim, cfg.taskgen.classes, cfg.taskgen.seen_tasks,
                     cfg.taskgen.unseen_tasks, cfg.taskgen.noise, cfg.taskgen.train_size,
                     cfg.taskgen.test_size, seed);
}

inline std::string steps_log_header(int n_experts) {
  std::string h = "task\tepoch\tstep\tl_task\tl_reg\tl_aux\tl_total\tlr";
  for (int i = 0; i < n_experts; ++i) h += "\tuse_" + std::to_string(i);
  h += "\n";
  return h;
}

inline std::string steps_log_line(const StepLogEntry& e) {
  std::string line = std::to_string(e.task) + "\t" + std::to_string(e.epoch) + "\t" +
                     std::to_string(e.step) + "\t" + format_double(e.loss_task) + "\t" +
                     format_double(e.loss_reg) + "\t" + format_double(e.loss_aux) + "\t" +
                     format_double(e.loss_total) + "\t" + format_double(e.lr);
  for (int u : e.usage) line += "\t" + std::to_string(u);
  line += "\n";
  return line;
}

struct SeedRunResult {
  AccuracyMatrix matrix;
  std::vector<TaskLog> task_logs;
  double wall_seconds = 0.0;
};

// One full stream for one seed, writing the artifact set into seed_dir. An
// optional checkpoint path resumes from a task boundary.
inline SeedRunResult run_single_seed(const ExperimentConfig& cfg, uint64_t seed,
                                     const std::string& seed_dir,
                                     const std::string& resume_checkpoint = "") {
  const auto t0 = std::chrono::steady_clock::now();
  ensure_dir(seed_dir);

  ModelConfig mc = cfg.model;
  mc.seed = seed;
  const TaskStream stream = stream_for(cfg, seed);
  write_file(seed_dir + "/manifest.json", stream_manifest(stream).dump(2) + "\n");

  ContinualState state = init_continual_state(mc, cfg.taskgen.seen_tasks, cfg.taskgen.unseen_tasks);
  if (!resume_checkpoint.empty()) load_checkpoint_into(resume_checkpoint, state);

  std::ofstream steps(seed_dir + "/steps.log", std::ios::binary);
  if (!steps) throw IoError("cannot write '" + seed_dir + "/steps.log'");
  steps << steps_log_header(mc.n_experts);

  SeedRunResult result;
  StreamSinks sinks;
  sinks.on_step = [&](const StepLogEntry& e) { steps << steps_log_line(e); };
  sinks.on_task_done = [&](const ContinualState& st, int, const TaskLog& log) {
    result.task_logs.push_back(log);
    save_checkpoint(seed_dir + "/checkpoint.v1", st);
  };

  run_stream(state, stream, cfg.trainer, cfg.ablation, sinks, cfg.run.stop_after_task);

  write_file(seed_dir + "/matrix.csv", matrix_to_csv(state.matrix));
  write_file(seed_dir + "/matrix.json", matrix_to_json(state.matrix).dump(2) + "\n");
  if (state.matrix.final_column_complete())
    write_file(seed_dir + "/summary.json",
               summary_to_json(seed, cfg.ablation, state.matrix).dump(2) + "\n");

  // expert load over the stream: fraction of routed tokens per expert per task
  {
    std::string csv = "task";
    for (int i = 0; i < mc.n_experts; ++i) csv += ",expert_" + std::to_string(i);
    csv += "\n";
    char buf[32];
    for (size_t t = 0; t < result.task_logs.size(); ++t) {
      csv += std::to_string(t + 1 + (state.task_cursor - result.task_logs.size()));
      const auto& log = result.task_logs[t];
      // tokens_routed counts tokens; each token selects top_k experts
      const double denom = double(log.tokens_routed) * mc.top_k;
      for (int i = 0; i < mc.n_experts; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.6f",
                      denom > 0 ? double(log.usage_totals[i]) / denom : 0.0);
        csv += buf;
      }
      csv += "\n";
    }
    write_file(seed_dir + "/expert_load.csv", csv);
  }

  result.matrix = state.matrix;
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

inline std::string seed_dir_for(const ExperimentConfig& cfg, uint64_t seed) {
  return cfg.run.out_dir + "/" + variant_label(cfg.ablation) + "/seed_" + std::to_string(seed);
}

inline int cmd_run(const ExperimentConfig& cfg, const std::string& resume_checkpoint = "") {
  cfg.validate();
  if (!resume_checkpoint.empty() && cfg.run.seeds.size() != 1)
    throw ConfigError("run: --resume requires exactly one seed");
  const std::string variant_dir = cfg.run.out_dir + "/" + variant_label(cfg.ablation);
  ensure_dir(variant_dir);
  write_file(variant_dir + "/config_resolved.cfg", cfg.echo());
  for (uint64_t seed : cfg.run.seeds) {
    const SeedRunResult r =
        run_single_seed(cfg, seed, seed_dir_for(cfg, seed), resume_checkpoint);
    std::cout << "seed " << seed << ": ";
    if (r.matrix.final_column_complete()) {
      std::cout << "AP=" << fmt4(average_performance(r.matrix))
                << " AF=" << fmt4(average_forgetting(r.matrix));
      if (r.matrix.n_unseen > 0) std::cout << " ZST=" << fmt4(zero_shot_transfer(r.matrix));
    } else {
      std::cout << "stopped after task " << cfg.run.stop_after_task;
    }
    std::cout << " (" << fmt4(r.wall_seconds) << "s)\n";
  }
  return 0;
}

// Warm-up probe dump for one task: runs the stream up to the task, probes it,
// and reports the consistency scores and importance statistics.
inline std::string probe_report(const ExperimentConfig& cfg, uint64_t seed, int task_number) {
  cfg.validate();
  if (task_number < 1 || task_number > cfg.taskgen.seen_tasks)
    throw ConfigError("probe: task number out of range");
  ModelConfig mc = cfg.model;
  mc.seed = seed;
  const TaskStream stream = stream_for(cfg, seed);
  ContinualState state = init_continual_state(mc, cfg.taskgen.seen_tasks, cfg.taskgen.unseen_tasks);
  for (int t = 0; t < task_number - 1; ++t) run_task(state, stream.seen[t], cfg.trainer, cfg.ablation);
  const ProbeOutcome probe = probe_task(state, stream.seen[task_number - 1]);

  std::ostringstream out;
  out << "probe report: task " << task_number << " (angle "
      << fmt4(stream.seen[task_number - 1].spec.angle) << " rad), seed " << seed << "\n";
  out << "consistency scores (one per stable expert):\n";
  for (size_t i = 0; i < probe.consistency.size(); ++i)
    out << "  expert " << i << ": " << fmt4(probe.consistency[i]) << "\n";
  auto stats = [&](const char* name, const Matrix& m) {
    double lo = m.data[0], hi = m.data[0], sum = 0.0;
    for (double v : m.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    out << "  " << name << ": min " << format_double(lo) << "  mean "
        << format_double(sum / double(m.size())) << "  max " << format_double(hi) << "\n";
  };
  out << "prospective importance:\n";
  stats("omega_A", probe.mask.omega_a);
  stats("omega_B", probe.mask.omega_b);
  return out.str();
}

// ---------------------------------------------------------------------------
// parameter-count presets

// 32-layer, d=4096, ffn=11008 backbone; all seven projections, pooled rank 32
// across 8 experts.
inline ArchSpec superni_arch() {
  ArchSpec a;
  a.layers = 32;
  a.rank = 32;
  a.experts = 8;
  a.modules = {{4096, 4096, 4}, {4096, 11008, 2}, {11008, 4096, 1}};
  return a;
}

// FFN-only variant: pooled rank 16 across 4 experts.
inline ArchSpec vqa_arch() {
  ArchSpec a;
  a.layers = 32;
  a.rank = 16;
  a.experts = 4;
  a.modules = {{4096, 11008, 2}, {11008, 4096, 1}};
  return a;
}

inline ArchSpec trivial_arch() {
  ArchSpec a;
  a.layers = 1;
  a.rank = 1;
  a.experts = 1;
  a.modules = {{2, 2, 1}};
  return a;
}

inline std::string count_params_text(const ArchSpec& arch, double backbone_params) {
  const unsigned long long total = count_trainable_params(arch);
  std::string out = std::to_string(total);
  if (backbone_params > 0) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), " (%.2f%% of %.0f)", 100.0 * double(total) / backbone_params,
                  backbone_params);
    out += buf;
  }
  out += "\n";
  return out;
}

}  // namespace cpmoe
