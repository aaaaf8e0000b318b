#pragma once

// Packaged verification runs: the spectral-filter equivalence suite on random
// PSD quadratics, and the finite-difference check of the full training
// objective on a seeded tiny model. Used by the CLI subcommands and the
// acceptance suite.

#include <cmath>
#include <string>
#include <vector>

#include "cpmoe/consolidation.hpp"
#include "cpmoe/model.hpp"
#include "cpmoe/oracles.hpp"
#include "cpmoe/rng.hpp"

namespace cpmoe {

struct Theorem1Report {
  struct Problem {
    int dim = 0;
    int steps = 0;
    double rel_error = 0.0;
  };
  std::vector<Problem> problems;
  double max_rel_error = 0.0;
  bool zero_curvature_exact = false;  // H = 0 must reproduce -eta*S*g bitwise
  double limit_rel_error = 0.0;       // S -> infinity against -H^{-1} g
  bool pass = false;
};

inline Theorem1Report run_theorem1_suite(int n_problems = 100, uint64_t seed = 2024) {
  Theorem1Report report;
  Rng rng(seed);
  for (int i = 0; i < n_problems; ++i) {
    QuadraticProblem p;
    const int d = 2 + static_cast<int>(rng.bounded(63));    // 2..64
    p.steps = 1 + static_cast<int>(rng.bounded(200));       // 1..200
    p.hess = make_random_psd(d, rng);
    p.eta = 1.0 / (2.0 * spectral_norm(p.hess));
    p.grad.resize(d);
    for (double& g : p.grad) g = rng.normal();

    const Vec sim = simulate_gd(p);
    const Vec closed = closed_form_displacement(p);
    double num = 0.0, den = 0.0;
    for (size_t k = 0; k < sim.size(); ++k) {
      const double diff = closed[k] - sim[k];
      num += diff * diff;
      den += sim[k] * sim[k];
    }
    const double rel = std::sqrt(num) / std::sqrt(den);
    report.problems.push_back({d, p.steps, rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }

  // Zero curvature: with dyadic gradient entries and a power-of-two step
  // size, S repeated additions are exact in IEEE-754, so both routes must
  // reproduce -eta*S*g bit for bit.
  {
    QuadraticProblem p;
    const int d = 16;
    p.steps = 137;
    p.hess = Matrix(d, d);
    p.eta = 0.5;
    p.grad.resize(d);
    for (double& g : p.grad) {
      const double q = static_cast<double>(static_cast<long long>(rng.bounded(1 << 21)) -
                                           (1 << 20));
      g = q / double(1 << 20);
    }
    const Vec sim = simulate_gd(p);
    const Vec closed = closed_form_displacement(p);
    bool exact = true;
    for (int k = 0; k < d; ++k) {
      const double expected = -(p.eta * p.steps) * p.grad[k];
      if (sim[k] != expected || closed[k] != expected) exact = false;
    }
    report.zero_curvature_exact = exact;
  }

  // Convergence limit on a strictly positive-definite problem.
  {
    QuadraticProblem p;
    const int d = 8;
    p.steps = 10000;
    p.hess = make_random_psd(d, rng, /*ridge=*/0.5);
    p.eta = 1.0 / (2.0 * spectral_norm(p.hess));
    p.grad.resize(d);
    for (double& g : p.grad) g = rng.normal();
    const Vec sim = simulate_gd(p);
    Vec target = solve_linear(p.hess, p.grad);
    for (double& v : target) v = -v;
    double num = 0.0, den = 0.0;
    for (int k = 0; k < d; ++k) {
      const double diff = sim[k] - target[k];
      num += diff * diff;
      den += target[k] * target[k];
    }
    report.limit_rel_error = std::sqrt(num) / std::sqrt(den);
  }

  report.pass = report.max_rel_error <= 1e-8 && report.zero_curvature_exact &&
                report.limit_rel_error <= 1e-6;
  return report;
}

// ---------------------------------------------------------------------------
// full-objective gradient check on a seeded tiny model

struct ModelGradcheckReport {
  struct Group {
    std::string name;
    double max_rel_error = 0.0;
    int resamples = 0;
  };
  std::vector<Group> groups;
  double max_rel_error = 0.0;
  bool pass = false;
};

// Holds a perturbable evaluation point: model, consolidation history with
// nonzero importance, a routing bias, and a fixed batch. The loss is the full
// objective (task + lambda*reg + gamma*aux); dropout stays off so the loss is
// a deterministic function of the parameters.
class GradcheckFixture {
 public:
  explicit GradcheckFixture(uint64_t seed) { resample(seed); }

  void resample(uint64_t seed) {
    Rng rng(splitmix64(seed));
    ModelConfig cfg;
    cfg.d_in = 8;
    cfg.d_hidden = 8;
    cfg.n_classes = 3;
    cfg.n_experts = 3;
    cfg.expert_rank = 2;
    cfg.top_k = 2;
    cfg.lora_dropout = 0.0;
    cfg.lambda = 5e3;
    cfg.gamma = 0.1;
    cfg.backbone_scale = 0.5;
    cfg.seed = seed;
    model_ = make_model(cfg, rng);
    // nonzero B and a stronger gate so no gradient group is trivially zero
    for (auto& e : model_.layer.experts)
      for (double& v : e.b.data) v = 0.2 * rng.normal();
    for (double& v : model_.layer.router.w_gate.data) v = 0.5 * rng.normal();

    cons_ = ConsolidationState::fresh(cfg);
    for (size_t i = 0; i < cons_.experts.size(); ++i) {
      auto& c = cons_.experts[i];
      for (double& v : c.omega_a.data) v = std::abs(rng.normal()) * 0.5;
      for (double& v : c.omega_b.data) v = std::abs(rng.normal()) * 0.5;
      c.a_old = model_.layer.experts[i].a;
      c.b_old = model_.layer.experts[i].b;
      for (double& v : c.a_old.data) v += 0.01 * rng.normal();
      for (double& v : c.b_old.data) v += 0.01 * rng.normal();
      c.has_snapshot = true;
    }

    bias_.resize(cfg.n_experts);
    for (double& v : bias_) v = rng.uniform();

    xs_.assign(8, Vec(cfg.d_in));
    ys_.resize(8);
    for (size_t s = 0; s < xs_.size(); ++s) {
      for (double& v : xs_[s]) v = rng.normal();
      ys_[s] = static_cast<int>(rng.bounded(cfg.n_classes));
    }
  }

  double loss() const {
    const TaskBatchResult tb = task_loss_and_grads(model_, xs_, ys_, &bias_);
    const double reg = reg_loss(cons_, model_.layer.experts);
    const auto sel = native_selections(tb.traces, model_.cfg.top_k);
    std::vector<Vec> probs;
    probs.reserve(tb.traces.size());
    for (const auto& t : tb.traces) probs.push_back(t.block.route.native_probs);
    const double aux = aux_loss(probs, sel, model_.cfg.n_experts);
    return total_loss(tb.loss, reg, aux, model_.cfg.lambda, model_.cfg.gamma);
  }

  uint64_t signature() const {
    Fnv1a h;
    ForwardOptions opt;
    opt.cp_bias = &bias_;
    for (const auto& x : xs_) {
      const ForwardTrace t = model_forward(model_, x, opt);
      for (int i : t.block.route.selected) h.add_bytes(&i, sizeof(i));
      for (int i : topk_indices(t.block.route.native_logits, model_.cfg.top_k))
        h.add_bytes(&i, sizeof(i));
    }
    return h.value();
  }

  ParamGrads analytic_grads() const {
    TaskBatchResult tb = task_loss_and_grads(model_, xs_, ys_, &bias_);
    add_reg_gradients(cons_, model_.layer.experts, model_.cfg.lambda, tb.grads);
    const auto sel = native_selections(tb.traces, model_.cfg.top_k);
    add_aux_gradients(tb.traces, sel, model_.cfg.gamma, tb.grads.w_gate);
    return tb.grads;
  }

  Model& model() { return model_; }

 private:
  Model model_;
  ConsolidationState cons_;
  Vec bias_;
  std::vector<Vec> xs_;
  std::vector<int> ys_;
};

inline ModelGradcheckReport run_model_gradcheck(uint64_t seed = 7, double step = 1e-5) {
  GradcheckFixture fixture(seed);
  ModelGradcheckReport report;

  struct GroupSpec {
    std::string name;
    int expert = -1;  // -1 means the router
    bool factor_a = false;
  };
  std::vector<GroupSpec> groups;
  for (int i = 0; i < fixture.model().cfg.n_experts; ++i) {
    groups.push_back({"expert" + std::to_string(i) + ".A", i, true});
    groups.push_back({"expert" + std::to_string(i) + ".B", i, false});
  }
  groups.push_back({"router.W", -1, false});

  for (const auto& group : groups) {
    GradcheckSpec spec;
    spec.loss = [&]() { return fixture.loss(); };
    spec.signature = [&]() { return fixture.signature(); };
    spec.resample = [&](int attempt) { fixture.resample(seed + 1000 * attempt); };
    spec.entries = [&]() {
      const ParamGrads grads = fixture.analytic_grads();
      std::vector<GradcheckEntry> entries;
      Matrix* param = nullptr;
      const Matrix* grad = nullptr;
      if (group.expert < 0) {
        param = &fixture.model().layer.router.w_gate;
        grad = &grads.w_gate;
      } else if (group.factor_a) {
        param = &fixture.model().layer.experts[group.expert].a;
        grad = &grads.a[group.expert];
      } else {
        param = &fixture.model().layer.experts[group.expert].b;
        grad = &grads.b[group.expert];
      }
      for (size_t k = 0; k < param->data.size(); ++k)
        entries.push_back({&param->data[k], grad->data[k],
                           group.name + "[" + std::to_string(k) + "]"});
      return entries;
    };
    const GradcheckResult result = run_gradcheck(spec, step);
    report.groups.push_back({group.name, result.max_rel_error, result.resamples});
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
  }
  report.pass = report.max_rel_error < 1e-4;
  return report;
}

}  // namespace cpmoe
