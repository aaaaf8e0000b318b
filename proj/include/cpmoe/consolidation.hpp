#pragma once

// Post-task consolidation: consistency-weighted importance accumulation,
// parameter snapshots, the protected-update regulariser over the low-rank
// factors, and the load-balancing auxiliary objective.

#include <vector>

#include "cpmoe/model.hpp"
#include "cpmoe/numerics.hpp"
#include "cpmoe/probe.hpp"

namespace cpmoe {

struct ExpertConsolidation {
  Matrix omega_a;  // accumulated importance, entrywise non-decreasing across tasks
  Matrix omega_b;
  Matrix a_old;    // snapshot from the end of the previous task
  Matrix b_old;
  bool has_snapshot = false;
};

struct ConsolidationState {
  std::vector<ExpertConsolidation> experts;
  int task_index = 0;  // number of completed snapshot cycles

  static ConsolidationState fresh(const ModelConfig& cfg) {
    ConsolidationState s;
    s.experts.resize(cfg.n_experts);
    for (auto& e : s.experts) {
      e.omega_a = Matrix(cfg.expert_rank, cfg.d_in);
      e.omega_b = Matrix(cfg.d_hidden, cfg.expert_rank);
    }
    return s;
  }
};

// Omega_total^(i) += h_i * Omega_t for both factors of every expert.
inline void accumulate_importance(ConsolidationState& state, const ImportanceMask& mask,
                                  const Vec& consistency) {
  if (consistency.size() != state.experts.size())
    throw DimensionError("accumulate_importance: " + std::to_string(consistency.size()) +
                         " scores for " + std::to_string(state.experts.size()) + " experts");
  for (size_t i = 0; i < state.experts.size(); ++i) {
    auto& e = state.experts[i];
    if (!e.omega_a.same_shape(mask.omega_a) || !e.omega_b.same_shape(mask.omega_b))
      throw DimensionError("accumulate_importance: importance shape mismatch");
    const double h = consistency[i];
    for (size_t k = 0; k < e.omega_a.data.size(); ++k)
      e.omega_a.data[k] += h * mask.omega_a.data[k];
    for (size_t k = 0; k < e.omega_b.data.size(); ++k)
      e.omega_b.data[k] += h * mask.omega_b.data[k];
  }
}

inline bool has_nonzero(const Matrix& m) {
  for (double v : m.data)
    if (v != 0.0) return true;
  return false;
}

// sum_i <Omega_A, (A - A_old)^2> + <Omega_B, (B - B_old)^2>. Zero for a fresh
// history regardless of snapshots.
inline double reg_loss(const ConsolidationState& state, const std::vector<LoraExpert>& experts) {
  if (experts.size() != state.experts.size())
    throw DimensionError("reg_loss: expert count mismatch");
  double total = 0.0;
  for (size_t i = 0; i < experts.size(); ++i) {
    const auto& c = state.experts[i];
    const bool active = has_nonzero(c.omega_a) || has_nonzero(c.omega_b);
    if (!active) continue;
    if (!c.has_snapshot)
      throw Error("reg_loss: expert " + std::to_string(i) +
                  " has accumulated importance but no snapshot");
    for (size_t k = 0; k < c.omega_a.data.size(); ++k) {
      const double d = experts[i].a.data[k] - c.a_old.data[k];
      total += c.omega_a.data[k] * d * d;
    }
    for (size_t k = 0; k < c.omega_b.data.size(); ++k) {
      const double d = experts[i].b.data[k] - c.b_old.data[k];
      total += c.omega_b.data[k] * d * d;
    }
  }
  return total;
}

// grads += lambda * 2 Omega .* (param - snapshot); closed-form adjoint of
// reg_loss. The router is deliberately not covered.
inline void add_reg_gradients(const ConsolidationState& state,
                              const std::vector<LoraExpert>& experts, double lambda,
                              ParamGrads& grads) {
  if (lambda == 0.0) return;
  for (size_t i = 0; i < experts.size(); ++i) {
    const auto& c = state.experts[i];
    const bool active = has_nonzero(c.omega_a) || has_nonzero(c.omega_b);
    if (!active) continue;
    if (!c.has_snapshot)
      throw Error("add_reg_gradients: expert " + std::to_string(i) +
                  " has accumulated importance but no snapshot");
    for (size_t k = 0; k < c.omega_a.data.size(); ++k)
      grads.a[i].data[k] +=
          lambda * 2.0 * c.omega_a.data[k] * (experts[i].a.data[k] - c.a_old.data[k]);
    for (size_t k = 0; k < c.omega_b.data.size(); ++k)
      grads.b[i].data[k] +=
          lambda * 2.0 * c.omega_b.data[k] * (experts[i].b.data[k] - c.b_old.data[k]);
  }
}

// sum_i f_i P_i where f_i is the fraction of tokens whose selection set
// contains i and P_i is the mean routing probability. Callers must pass
// probabilities and selections derived from native (unbiased) logits so the
// value cannot depend on the consistency bias.
inline double aux_loss(const std::vector<Vec>& native_probs,
                       const std::vector<std::vector<int>>& selections, int n_experts) {
  if (native_probs.empty()) throw DimensionError("aux_loss: empty batch");
  if (native_probs.size() != selections.size())
    throw DimensionError("aux_loss: probs/selections length mismatch");
  const double inv_t = 1.0 / double(native_probs.size());
  Vec fraction(n_experts, 0.0);
  Vec mean_prob(n_experts, 0.0);
  for (size_t t = 0; t < native_probs.size(); ++t) {
    if (native_probs[t].size() != static_cast<size_t>(n_experts))
      throw DimensionError("aux_loss: probability vector length mismatch");
    for (int i : selections[t]) {
      if (i < 0 || i >= n_experts) throw DimensionError("aux_loss: selection index out of range");
      fraction[i] += inv_t;
    }
    for (int i = 0; i < n_experts; ++i) mean_prob[i] += native_probs[t][i] * inv_t;
  }
  double total = 0.0;
  for (int i = 0; i < n_experts; ++i) total += fraction[i] * mean_prob[i];
  return total;
}

// dL_aux/ds_{t,j} = (1/T) p_{t,j} (f_j - sum_i f_i p_{t,i}); f is treated as
// constant, like the top-K selection itself.
inline void add_aux_gradients(const std::vector<ForwardTrace>& traces,
                              const std::vector<std::vector<int>>& native_selections,
                              double gamma, Matrix& w_gate_grad) {
  if (gamma == 0.0 || traces.empty()) return;
  const int n = static_cast<int>(traces[0].block.route.native_probs.size());
  const double inv_t = 1.0 / double(traces.size());
  Vec fraction(n, 0.0);
  for (const auto& sel : native_selections)
    for (int i : sel) fraction[i] += inv_t;
  for (size_t t = 0; t < traces.size(); ++t) {
    const Vec& p = traces[t].block.route.native_probs;
    double mix = 0.0;
    for (int i = 0; i < n; ++i) mix += fraction[i] * p[i];
    for (int j = 0; j < n; ++j) {
      const double ds = gamma * inv_t * p[j] * (fraction[j] - mix);
      for (int row = 0; row < w_gate_grad.rows; ++row)
        w_gate_grad.at(row, j) += ds * traces[t].x[row];
    }
  }
}

// Native top-K per token, same tie-break as routing, for the aux term.
inline std::vector<std::vector<int>> native_selections(const std::vector<ForwardTrace>& traces,
                                                       int k) {
  std::vector<std::vector<int>> out;
  out.reserve(traces.size());
  for (const auto& t : traces) out.push_back(topk_indices(t.block.route.native_logits, k));
  return out;
}

inline double total_loss(double task, double reg, double aux, double lambda, double gamma) {
  if (!std::isfinite(task) || !std::isfinite(reg) || !std::isfinite(aux))
    throw NumericError("total_loss: non-finite input");
  return task + lambda * reg + gamma * aux;
}

// Deep copies of the current factors become the new protected reference.
inline void snapshot_experts(ConsolidationState& state, const std::vector<LoraExpert>& experts) {
  if (experts.size() != state.experts.size())
    throw DimensionError("snapshot_experts: expert count mismatch");
  for (size_t i = 0; i < experts.size(); ++i) {
    state.experts[i].a_old = experts[i].a;
    state.experts[i].b_old = experts[i].b;
    state.experts[i].has_snapshot = true;
  }
  state.task_index++;
}

}  // namespace cpmoe
