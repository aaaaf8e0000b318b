// cpmoe command-line driver.
//
// Subcommands: run, report, probe, verify-theorem1, gradcheck, count-params.
// All state flows through the config file and flags; environment variables
// are deliberately ignored.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpmoe/cli.hpp"
#include "cpmoe/config.hpp"
#include "cpmoe/report.hpp"
#include "cpmoe/verification.hpp"

namespace {

cpmoe::ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) {
    cpmoe::ExperimentConfig cfg;
    cfg.validate();
    return cfg;
  }
  return cpmoe::ExperimentConfig::load(path);
}

void apply_overrides(cpmoe::ExperimentConfig& cfg, const std::string& out_dir,
                     const std::vector<uint64_t>& seeds, const std::string& ablate) {
  if (!out_dir.empty()) cfg.run.out_dir = out_dir;
  if (!seeds.empty()) cfg.run.seeds = seeds;
  if (!ablate.empty()) {
    std::stringstream ss(ablate);
    std::string name;
    while (std::getline(ss, name, ',')) {
      if (name == "cp_bias")
        cfg.ablation.cp_bias = false;
      else if (name == "te_reg")
        cfg.ablation.te_reg = false;
      else if (name == "cka_weighting")
        cfg.ablation.cka_weighting = false;
      else
        throw cpmoe::ConfigError("unknown ablation switch '" + name +
                                 "' (expected cp_bias, te_reg, cka_weighting)");
    }
  }
  cfg.validate();
}

int dispatch(int argc, char** argv) {
  CLI::App app{"desk-scale continual learning with consistency-routed low-rank experts"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ablate, resume;
  std::vector<uint64_t> seeds;

  auto* run = app.add_subcommand("run", "run the continual-learning experiment");
  run->add_option("--config", config_path, "config file (key = value sections)");
  run->add_option("--seed", seeds, "seed override (repeatable)");
  run->add_option("--out", out_dir, "output directory override");
  run->add_option("--ablate", ablate, "comma list of switches to disable");
  run->add_option("--resume", resume, "checkpoint.v1 to resume from");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "render AP/AF/ZST tables from run artifacts");
  report->add_option("dir", report_dir, "run directory")->required();

  int probe_task_number = 1;
  auto* probe = app.add_subcommand("probe", "dump warm-up importance and consistency scores");
  probe->add_option("--config", config_path, "config file");
  probe->add_option("--seed", seeds, "seed override (repeatable)");
  probe->add_option("--task", probe_task_number, "1-based task number to probe");

  auto* verify = app.add_subcommand("verify-theorem1", "check the spectral-filter identity");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the objective");

  std::string preset;
  long long cp_layers = 1, cp_rank = 1, cp_experts = 1;
  std::vector<std::string> cp_modules;
  double backbone_params = 6.7e9;
  auto* count = app.add_subcommand("count-params", "trainable-parameter accounting");
  count->add_option("--preset", preset, "superni | vqa | trivial");
  count->add_option("--layers", cp_layers, "layer count (custom mode)");
  count->add_option("--rank", cp_rank, "pooled low-rank budget (custom mode)");
  count->add_option("--experts", cp_experts, "expert count (custom mode)");
  count->add_option("--module", cp_modules, "in:out[:count], repeatable (custom mode)");
  count->add_option("--backbone-params", backbone_params, "backbone size for the percentage");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    cpmoe::ExperimentConfig cfg = load_config_or_default(config_path);
    apply_overrides(cfg, out_dir, seeds, ablate);
    return cpmoe::cmd_run(cfg, resume);
  }
  if (report->parsed()) {
    std::cout << cpmoe::render_report(report_dir);
    return 0;
  }
  if (probe->parsed()) {
    cpmoe::ExperimentConfig cfg = load_config_or_default(config_path);
    apply_overrides(cfg, out_dir, seeds, "");
    std::cout << cpmoe::probe_report(cfg, cfg.run.seeds.front(), probe_task_number);
    return 0;
  }
  if (verify->parsed()) {
    const cpmoe::Theorem1Report r = cpmoe::run_theorem1_suite();
    for (size_t i = 0; i < r.problems.size(); ++i) {
      const auto& p = r.problems[i];
      std::printf("problem %3zu: d=%2d S=%3d rel=%.3e\n", i + 1, p.dim, p.steps, p.rel_error);
    }
    std::printf("max relative error: %.3e (bound 1e-8)\n", r.max_rel_error);
    std::printf("zero-curvature case exact: %s\n", r.zero_curvature_exact ? "yes" : "no");
    std::printf("S->inf limit relative error: %.3e (bound 1e-6)\n", r.limit_rel_error);
    std::printf("%s\n", r.pass ? "PASS" : "FAIL");
    return r.pass ? 0 : 2;
  }
  if (gradcheck->parsed()) {
    const cpmoe::ModelGradcheckReport r = cpmoe::run_model_gradcheck();
    for (const auto& g : r.groups)
      std::printf("%-12s max rel error %.3e (resamples %d)\n", g.name.c_str(), g.max_rel_error,
                  g.resamples);
    std::printf("overall max rel error: %.3e (bound 1e-4)\n", r.max_rel_error);
    std::printf("%s\n", r.pass ? "PASS" : "FAIL");
    return r.pass ? 0 : 2;
  }
  if (count->parsed()) {
    cpmoe::ArchSpec arch;
    if (preset == "superni") {
      arch = cpmoe::superni_arch();
    } else if (preset == "vqa") {
      arch = cpmoe::vqa_arch();
    } else if (preset == "trivial") {
      arch = cpmoe::trivial_arch();
      backbone_params = 0.0;
    } else if (preset.empty()) {
      arch.layers = static_cast<int>(cp_layers);
      arch.rank = cp_rank;
      arch.experts = cp_experts;
      for (const auto& spec : cp_modules) {
        cpmoe::ModuleDims dims;
        if (std::sscanf(spec.c_str(), "%lld:%lld:%d", &dims.in, &dims.out, &dims.count) < 2)
          throw cpmoe::ConfigError("count-params: --module expects in:out[:count], got '" +
                                   spec + "'");
        arch.modules.push_back(dims);
      }
      if (arch.modules.empty())
        throw cpmoe::ConfigError("count-params: give --preset or at least one --module");
    } else {
      throw cpmoe::ConfigError("count-params: unknown preset '" + preset + "'");
    }
    std::cout << cpmoe::count_params_text(arch, backbone_params);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const cpmoe::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const cpmoe::NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const cpmoe::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
