#pragma once

// Per-task continual-learning loop: warm-up probe, protected training under
// the accumulated importance, deferred accumulation, snapshot. Single logical
// thread; all randomness flows through the state's training RNG in a fixed
// order so runs replay bit-identically.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "cpmoe/consolidation.hpp"
#include "cpmoe/metrics.hpp"
#include "cpmoe/model.hpp"
#include "cpmoe/probe.hpp"
#include "cpmoe/taskgen.hpp"

namespace cpmoe {

struct TrainerConfig {
  int epochs = 5;
  int batch_size = 16;
  double base_lr = 2e-4;
  double weight_decay = 0.0;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("trainer: epochs/batch_size must be >= 1");
    if (base_lr <= 0.0) throw ConfigError("trainer: base_lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("trainer: weight_decay must be >= 0");
  }
};

struct AblationSwitches {
  bool cp_bias = true;        // consistency bias on the router logits
  bool te_reg = true;         // importance-protected regularisation
  bool cka_weighting = true;  // consistency-weighted (vs uniform) accumulation
};

inline double cosine_lr(double base, int step, int total_steps) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    throw ConfigError("cosine_lr: step outside schedule");
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void init(const std::vector<size_t>& sizes) {
    m_.clear();
    v_.clear();
    for (size_t n : sizes) {
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
    t_ = 0;
  }

  long long step_count() const { return t_; }

  void step(const std::vector<double*>& params, const std::vector<const double*>& grads,
            double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw DimensionError("adamw: group count mismatch");
    t_++;
    const double bc1 = 1.0 - std::pow(beta1, double(t_));
    const double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (size_t g = 0; g < params.size(); ++g) {
      double* p = params[g];
      const double* gr = grads[g];
      Vec& m = m_[g];
      Vec& v = v_[g];
      for (size_t k = 0; k < m.size(); ++k) {
        const double grad = gr[k];
        if (!std::isfinite(grad)) throw NumericError("adamw: non-finite gradient");
        m[k] = beta1 * m[k] + (1.0 - beta1) * grad;
        v[k] = beta2 * v[k] + (1.0 - beta2) * grad * grad;
        const double m_hat = m[k] / bc1;
        const double v_hat = v[k] / bc2;
        p[k] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * p[k]);
      }
    }
  }

 private:
  std::vector<Vec> m_, v_;
  long long t_ = 0;
};

inline std::vector<size_t> trainable_sizes(const Model& m) {
  std::vector<size_t> sizes;
  for (const auto& e : m.layer.experts) {
    sizes.push_back(e.a.size());
    sizes.push_back(e.b.size());
  }
  sizes.push_back(m.layer.router.w_gate.size());
  return sizes;
}

inline std::vector<double*> trainable_params(Model& m) {
  std::vector<double*> out;
  for (auto& e : m.layer.experts) {
    out.push_back(e.a.data.data());
    out.push_back(e.b.data.data());
  }
  out.push_back(m.layer.router.w_gate.data.data());
  return out;
}

inline std::vector<const double*> grad_pointers(const ParamGrads& g) {
  std::vector<const double*> out;
  for (size_t i = 0; i < g.a.size(); ++i) {
    out.push_back(g.a[i].data.data());
    out.push_back(g.b[i].data.data());
  }
  out.push_back(g.w_gate.data.data());
  return out;
}

struct StepLogEntry {
  int task = 0;   // 1-based
  int epoch = 0;  // 1-based
  int step = 0;   // 0-based within the task
  double loss_task = 0.0, loss_reg = 0.0, loss_aux = 0.0, loss_total = 0.0;
  double lr = 0.0;
  std::vector<int> usage;  // routed-token count per expert in this batch
};

struct TaskLog {
  bool probed = false;
  Vec consistency;          // raw CKA scores from this task's warm-up
  Vec bias_applied;         // what routing actually saw (zeros when disabled)
  std::vector<double> epoch_task_loss;
  std::vector<double> epoch_total_loss;
  std::vector<long long> usage_totals;  // routed-token counts over the task
  long long tokens_routed = 0;
  int steps = 0;
};

struct ContinualState {
  ModelConfig cfg;
  Model model;
  ConsolidationState cons;
  Vec cka_bias;  // active routing bias, refreshed by each task's warm-up
  int task_cursor = 0;
  Rng train_rng{0};
  AccuracyMatrix matrix;
  uint64_t backbone_hash = 0;
};

inline ContinualState init_continual_state(const ModelConfig& cfg, int n_seen, int n_unseen) {
  ContinualState st;
  st.cfg = cfg;
  Rng model_rng(derive_seed(cfg.seed, SeedDomain::kModel));
  st.model = make_model(cfg, model_rng);
  st.cons = ConsolidationState::fresh(cfg);
  st.cka_bias.assign(cfg.n_experts, 0.0);
  st.train_rng = Rng(derive_seed(cfg.seed, SeedDomain::kTrain));
  st.matrix = AccuracyMatrix(n_seen, n_unseen);
  st.backbone_hash = st.model.backbone.param_hash();
  return st;
}

// Fraction of argmax-correct predictions; dropout off, the latest bias active.
inline double evaluate(const Model& m, const Dataset& data, const Vec& bias) {
  if (data.size() == 0) throw DimensionError("evaluate: empty dataset");
  ForwardOptions opt;
  if (!bias.empty()) opt.cp_bias = &bias;
  int correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const ForwardTrace t = model_forward(m, data.x[i], opt);
    if (argmax_lowest(t.logits) == data.y[i]) correct++;
  }
  return double(correct) / double(data.size());
}

struct ProbeOutcome {
  ImportanceMask mask;
  Vec consistency;
};

// Warm-up on the task's data prefix: trains a fresh transient expert while
// everything else stays frozen, then derives the importance mask and the
// per-expert consistency scores. The transient expert does not survive this
// function.
inline ProbeOutcome probe_task(ContinualState& st, const TaskData& task) {
  const ModelConfig& cfg = st.cfg;
  const int warmup = std::min<int>(cfg.warmup_samples, static_cast<int>(task.train.size()));
  if (warmup < cfg.warmup_batch)
    throw ConfigError("probe: warm-up of " + std::to_string(warmup) +
                      " samples is shorter than one batch of " +
                      std::to_string(cfg.warmup_batch));
  TransientExpert te = make_transient_expert(cfg, st.train_rng);
  const std::vector<Vec> xs(task.train.x.begin(), task.train.x.begin() + warmup);
  const std::vector<int> ys(task.train.y.begin(), task.train.y.begin() + warmup);
  WarmupResult wr = warmup_transient(st.model, std::move(te), xs, ys, cfg.warmup_lr,
                                     cfg.warmup_batch);
  ProbeOutcome out;
  out.mask = finalize_importance(wr.traj, wr.te, cfg.damping);
  out.consistency = consistency_scores(wr.acts);
  return out;
}

using StepSink = std::function<void(const StepLogEntry&)>;

inline TaskLog run_task(ContinualState& st, const TaskData& task, const TrainerConfig& tc,
                        const AblationSwitches& sw, const StepSink& on_step = {}) {
  tc.validate();
  if (task.train.size() == 0) throw DimensionError("run_task: empty task dataset");
  const ModelConfig& cfg = st.cfg;
  const int n_experts = cfg.n_experts;

  TaskLog log;
  log.usage_totals.assign(n_experts, 0);

  // 1. probe, unless nothing downstream consumes its products
  ProbeOutcome probe;
  const bool need_probe = sw.cp_bias || sw.te_reg;
  if (need_probe) {
    probe = probe_task(st, task);
    log.probed = true;
    log.consistency = probe.consistency;
  } else {
    probe.consistency.assign(n_experts, 0.0);
    log.consistency.assign(n_experts, 0.0);
  }
  const Vec bias = sw.cp_bias ? probe.consistency : Vec(n_experts, 0.0);
  st.cka_bias = bias;
  log.bias_applied = bias;

  // 2. protected training under the importance accumulated from earlier tasks
  AdamW opt;
  opt.weight_decay = tc.weight_decay;
  opt.init(trainable_sizes(st.model));
  const int n_train = static_cast<int>(task.train.size());
  const int steps_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;
  const int total_steps = tc.epochs * steps_per_epoch;
  const double lambda = sw.te_reg ? cfg.lambda : 0.0;
  int step_index = 0;

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const uint64_t epoch_seed = st.train_rng.next_u64();
    double epoch_task = 0.0, epoch_total = 0.0;
    int epoch_batches = 0;
    for (const auto& batch : batches(n_train, tc.batch_size, epoch_seed)) {
      std::vector<Vec> bx;
      std::vector<int> by;
      bx.reserve(batch.size());
      by.reserve(batch.size());
      for (int idx : batch) {
        bx.push_back(task.train.x[idx]);
        by.push_back(task.train.y[idx]);
      }
      // inverted dropout masks on the expert path, drawn in sample order
      std::vector<Vec> masks;
      const bool use_dropout = cfg.lora_dropout > 0.0;
      if (use_dropout) {
        const double keep = 1.0 - cfg.lora_dropout;
        masks.resize(bx.size());
        for (auto& mask : masks) {
          mask.resize(cfg.d_in);
          for (double& v : mask) v = (st.train_rng.uniform() < keep) ? 1.0 / keep : 0.0;
        }
      }

      TaskBatchResult tb = task_loss_and_grads(st.model, bx, by, bias.empty() ? nullptr : &bias,
                                               use_dropout ? &masks : nullptr);
      const double l_reg = sw.te_reg ? reg_loss(st.cons, st.model.layer.experts) : 0.0;
      if (lambda != 0.0) add_reg_gradients(st.cons, st.model.layer.experts, lambda, tb.grads);

      const auto nat_sel = native_selections(tb.traces, cfg.top_k);
      std::vector<Vec> nat_probs;
      nat_probs.reserve(tb.traces.size());
      for (const auto& t : tb.traces) nat_probs.push_back(t.block.route.native_probs);
      const double l_aux = aux_loss(nat_probs, nat_sel, n_experts);
      add_aux_gradients(tb.traces, nat_sel, cfg.gamma, tb.grads.w_gate);

      const double l_total = total_loss(tb.loss, l_reg, l_aux, lambda, cfg.gamma);
      if (!std::isfinite(l_total))
        throw NumericError("run_task: non-finite loss at task " + std::to_string(st.task_cursor + 1) +
                           " epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(epoch_batches));

      const double lr = cosine_lr(tc.base_lr, step_index, total_steps);
      opt.step(trainable_params(st.model), grad_pointers(tb.grads), lr);

      StepLogEntry entry;
      entry.task = st.task_cursor + 1;
      entry.epoch = epoch;
      entry.step = step_index;
      entry.loss_task = tb.loss;
      entry.loss_reg = l_reg;
      entry.loss_aux = l_aux;
      entry.loss_total = l_total;
      entry.lr = lr;
      entry.usage.assign(n_experts, 0);
      for (const auto& t : tb.traces)
        for (int i : t.block.route.selected) entry.usage[i]++;
      for (int i = 0; i < n_experts; ++i) log.usage_totals[i] += entry.usage[i];
      log.tokens_routed += static_cast<long long>(tb.traces.size());
      if (on_step) on_step(entry);

      epoch_task += tb.loss;
      epoch_total += l_total;
      epoch_batches++;
      step_index++;
    }
    log.epoch_task_loss.push_back(epoch_task / epoch_batches);
    log.epoch_total_loss.push_back(epoch_total / epoch_batches);
  }
  log.steps = step_index;

  // 3. deferred accumulation: this task's importance starts protecting from
  // the next task on. With consistency weighting disabled every expert gets
  // the same strength, budget-matched to the mean score so the ablation
  // changes the allocation rather than the total amount of protection.
  if (sw.te_reg) {
    Vec weights = probe.consistency;
    if (!sw.cka_weighting) {
      double mean = 0.0;
      for (double h : probe.consistency) mean += h;
      mean /= double(n_experts);
      weights.assign(n_experts, mean);
    }
    accumulate_importance(st.cons, probe.mask, weights);
  }
  // 4. snapshot the just-trained factors as the new protected reference
  snapshot_experts(st.cons, st.model.layer.experts);
  return log;
}

struct StreamSinks {
  StepSink on_step;
  // invoked after each task completes and its matrix column is filled
  std::function<void(const ContinualState&, int task_index, const TaskLog&)> on_task_done;
};

// Runs the remaining tasks (starting at the state's cursor, which makes
// checkpoint resume a plain re-entry), evaluating on every seen and unseen
// task after each one. Training never touches any dataset other than the
// active task's.
inline void run_stream(ContinualState& st, const TaskStream& stream, const TrainerConfig& tc,
                       const AblationSwitches& sw, const StreamSinks& sinks = {},
                       int stop_after_task = 0) {
  const int n_seen = static_cast<int>(stream.seen.size());
  const int n_unseen = static_cast<int>(stream.unseen.size());
  if (st.matrix.n_seen != n_seen || st.matrix.n_unseen != n_unseen)
    throw DimensionError("run_stream: matrix shape does not match the stream");

  for (int t = st.task_cursor; t < n_seen; ++t) {
    if (st.model.backbone.param_hash() != st.backbone_hash)
      throw NumericError("run_stream: frozen backbone changed");
    TaskLog log = run_task(st, stream.seen[t], tc, sw, sinks.on_step);
    if (st.model.backbone.param_hash() != st.backbone_hash)
      throw NumericError("run_stream: frozen backbone changed during task " + std::to_string(t + 1));

    for (int j = 0; j < n_seen; ++j)
      st.matrix.set(j, t, evaluate(st.model, stream.seen[j].test, st.cka_bias));
    for (int u = 0; u < n_unseen; ++u)
      st.matrix.set(n_seen + u, t, evaluate(st.model, stream.unseen[u].test, st.cka_bias));

    st.task_cursor = t + 1;
    if (sinks.on_task_done) sinks.on_task_done(st, t, log);
    if (stop_after_task > 0 && st.task_cursor >= stop_after_task) break;
  }
}

}  // namespace cpmoe
