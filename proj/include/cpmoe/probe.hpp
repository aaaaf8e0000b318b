#pragma once

// Task-start probing. A disposable transient expert is trained by plain
// gradient descent on the warm-up prefix while everything else stays frozen;
// its trajectory yields per-parameter prospective importance, and its
// activations yield per-expert consistency scores via linear CKA.

#include <iostream>
#include <utility>
#include <vector>

#include "cpmoe/model.hpp"
#include "cpmoe/numerics.hpp"
#include "cpmoe/rng.hpp"

namespace cpmoe {

// Same shape as a stable expert; B starts at zero so the branch has no
// effect at step 0.
using TransientExpert = LoraExpert;

inline TransientExpert make_transient_expert(const ModelConfig& cfg, Rng& rng) {
  return make_lora_expert(cfg.expert_rank, cfg.d_in, cfg.d_hidden, rng);
}

struct WarmupTrajectory {
  Matrix phi0_a, phi0_b;    // parameters before the first step
  Matrix omega_a, omega_b;  // path-integral accumulator, >= 0 under plain GD
  int steps_taken = 0;
  double eta = 0.0;
  // Per-step records, enough to replay the trajectory independently.
  std::vector<std::pair<Matrix, Matrix>> snapshots;  // params after step s
  std::vector<std::pair<Matrix, Matrix>> gradients;  // gradient used at step s
};

struct ImportanceMask {
  Matrix omega_a;  // shape of A, all entries finite and >= 0
  Matrix omega_b;  // shape of B
};

struct ActivationBuffer {
  Matrix z_te;                // N x d_out, transient outputs on warm-up tokens
  std::vector<Matrix> z_se;   // per stable expert, computed densely
};

struct WarmupResult {
  TransientExpert te;
  WarmupTrajectory traj;
  ActivationBuffer acts;
};

// One plain-GD step per batch; omega accumulates -g .* dphi with dphi = -eta g,
// so every entry is eta*g^2 >= 0. The returned buffer holds the final probe's
// outputs together with every stable expert's outputs on the same tokens,
// dense regardless of routing.
inline WarmupResult warmup_transient(const Model& model, TransientExpert te,
                                     const std::vector<Vec>& xs, const std::vector<int>& ys,
                                     double eta, int batch_size) {
  if (xs.empty() || xs.size() != ys.size())
    throw DimensionError("warmup_transient: empty warm-up stream");
  if (batch_size < 1) throw ConfigError("warmup_transient: batch_size must be >= 1");
  if (eta <= 0.0) throw ConfigError("warmup_transient: eta must be > 0");

  WarmupResult r;
  r.traj.phi0_a = te.a;
  r.traj.phi0_b = te.b;
  r.traj.omega_a = Matrix(te.a.rows, te.a.cols);
  r.traj.omega_b = Matrix(te.b.rows, te.b.cols);
  r.traj.eta = eta;

  const size_t n = xs.size();
  for (size_t start = 0; start < n; start += batch_size) {
    const size_t stop = std::min(n, start + batch_size);
    const std::vector<Vec> bx(xs.begin() + start, xs.begin() + stop);
    const std::vector<int> by(ys.begin() + start, ys.begin() + stop);
    TransientGrads g = transient_loss_and_grads(model, te, bx, by);

    auto apply = [eta](Matrix& param, const Matrix& grad, Matrix& omega) {
      for (size_t k = 0; k < param.data.size(); ++k) {
        const double delta = -eta * grad.data[k];
        omega.data[k] += -grad.data[k] * delta;
        param.data[k] += delta;
      }
    };
    apply(te.a, g.a, r.traj.omega_a);
    apply(te.b, g.b, r.traj.omega_b);
    r.traj.steps_taken++;
    r.traj.snapshots.emplace_back(te.a, te.b);
    r.traj.gradients.emplace_back(std::move(g.a), std::move(g.b));
  }

  // Activation capture: the finished probe and all stable experts evaluated
  // on the warm-up tokens, no dropout.
  const int d_out = model.cfg.d_hidden;
  const int count = static_cast<int>(n);
  r.acts.z_te = Matrix(count, d_out);
  r.acts.z_se.assign(model.layer.experts.size(), Matrix(count, d_out));
  for (int t = 0; t < count; ++t) {
    const Vec out_te = expert_forward(te, xs[t]);
    for (int j = 0; j < d_out; ++j) r.acts.z_te.at(t, j) = out_te[j];
    for (size_t i = 0; i < model.layer.experts.size(); ++i) {
      const Vec out = expert_forward(model.layer.experts[i], xs[t]);
      for (int j = 0; j < d_out; ++j) r.acts.z_se[i].at(t, j) = out[j];
    }
  }

  r.te = std::move(te);
  return r;
}

// Omega_k = max(omega_k, 0) / ((phi_S,k - phi_0,k)^2 + xi). The clamp is a
// guard for non-GD optimizers; under plain GD omega is already nonnegative.
inline ImportanceMask finalize_importance(const WarmupTrajectory& traj, const TransientExpert& te,
                                          double xi) {
  if (xi <= 0.0) throw ConfigError("finalize_importance: xi must be > 0");
  if (traj.steps_taken < 1) throw ConfigError("finalize_importance: no warm-up steps taken");
  ImportanceMask mask;
  auto normalise = [xi](const Matrix& omega, const Matrix& phi_final, const Matrix& phi0) {
    Matrix out(omega.rows, omega.cols);
    for (size_t k = 0; k < omega.data.size(); ++k) {
      const double disp = phi_final.data[k] - phi0.data[k];
      out.data[k] = std::max(omega.data[k], 0.0) / (disp * disp + xi);
    }
    require_finite(out, "finalize_importance");
    return out;
  };
  mask.omega_a = normalise(traj.omega_a, te.a, traj.phi0_a);
  mask.omega_b = normalise(traj.omega_b, te.b, traj.phi0_b);
  return mask;
}

// Linear CKA between two already column-centred activation matrices:
//   ||Zb^T Za||_F^2 / (||Za^T Za||_F ||Zb^T Zb||_F)  in [0, 1].
// An all-zero matrix carries no representation, so the score is defined as 0.
inline double compute_cka(const Matrix& za, const Matrix& zb) {
  if (!za.same_shape(zb))
    throw DimensionError("compute_cka: shape mismatch " + za.shape_str() + " vs " +
                         zb.shape_str());
  const Matrix za_t = transpose(za);
  const Matrix zb_t = transpose(zb);
  const double self_a = frobenius_norm(matmul(za_t, za));
  const double self_b = frobenius_norm(matmul(zb_t, zb));
  if (self_a == 0.0 || self_b == 0.0) {
    std::cerr << "cpmoe: compute_cka on an all-zero activation matrix, score set to 0\n";
    return 0.0;
  }
  const Matrix cross = matmul(zb_t, za);
  const double num = frobenius_inner(cross, cross);
  return num / (self_a * self_b);
}

// One consistency score per stable expert, from column-centred activations.
inline Vec consistency_scores(const ActivationBuffer& buf) {
  if (buf.z_te.rows < 2) throw DimensionError("consistency_scores: need at least 2 tokens");
  const Matrix te_centred = center_columns(buf.z_te);
  Vec scores(buf.z_se.size());
  for (size_t i = 0; i < buf.z_se.size(); ++i)
    scores[i] = compute_cka(te_centred, center_columns(buf.z_se[i]));
  return scores;
}

}  // namespace cpmoe
