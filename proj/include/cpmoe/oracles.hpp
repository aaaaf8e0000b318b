#pragma once

// Independent verification machinery: the quadratic-model descent oracle for
// the spectral-filter identity, and a finite-difference gradient checker that
// resamples away from routing-selection boundaries.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cpmoe/numerics.hpp"
#include "cpmoe/rng.hpp"

namespace cpmoe {

struct QuadraticProblem {
  Matrix hess;  // d x d, symmetric PSD
  Vec grad;     // d
  double eta = 0.0;
  int steps = 0;
};

inline void require_symmetric(const Matrix& m, double tol = 1e-12) {
  if (m.rows != m.cols) throw DimensionError("quadratic problem: Hessian must be square");
  for (int i = 0; i < m.rows; ++i)
    for (int j = i + 1; j < m.cols; ++j)
      if (std::abs(m.at(i, j) - m.at(j, i)) > tol)
        throw NumericError("quadratic problem: Hessian not symmetric");
}

// Power iteration; 50 rounds with early exit once the Rayleigh quotient
// settles. Returns 0 for the zero matrix.
inline double spectral_norm(const Matrix& m, int iterations = 50, double tol = 1e-10) {
  if (m.rows != m.cols) throw DimensionError("spectral_norm: square matrix expected");
  Rng rng(0x5Bu ^ static_cast<uint64_t>(m.rows));
  Vec v(m.rows);
  for (double& x : v) x = rng.normal();
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Vec w = matvec(m, v);
    double norm = std::sqrt(dot(w, w));
    if (norm == 0.0) return 0.0;
    for (double& x : w) x /= norm;
    const double next = dot(w, matvec(m, w));
    v = std::move(w);
    if (it > 0 && std::abs(next - lambda) <= tol * std::max(1.0, std::abs(next))) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::abs(lambda);
}

inline void validate_problem(const QuadraticProblem& p) {
  require_symmetric(p.hess);
  if (p.grad.size() != static_cast<size_t>(p.hess.rows))
    throw DimensionError("quadratic problem: gradient length mismatch");
  if (p.steps < 1) throw ConfigError("quadratic problem: steps must be >= 1");
  if (p.eta <= 0.0) throw ConfigError("quadratic problem: eta must be > 0");
  const double norm = spectral_norm(p.hess);
  if (norm > 0.0 && p.eta >= 2.0 / norm)
    throw ConfigError("quadratic problem: eta violates the 2/||H|| step-size bound");
}

// delta_{s+1} = delta_s - eta (H delta_s + g), from delta_0 = 0: literally the
// warm-up update applied to the quadratic model.
inline Vec simulate_gd(const QuadraticProblem& p) {
  validate_problem(p);
  Vec delta(p.grad.size(), 0.0);
  for (int s = 0; s < p.steps; ++s) {
    const Vec hd = matvec(p.hess, delta);
    for (size_t k = 0; k < delta.size(); ++k) delta[k] -= p.eta * (hd[k] + p.grad[k]);
  }
  return delta;
}

// -eta sum_{s<S} (I - eta H)^s g evaluated in Horner form,
// acc <- g + (I - eta H) acc.
inline Vec closed_form_displacement(const QuadraticProblem& p) {
  validate_problem(p);
  Vec acc = p.grad;
  for (int s = 1; s < p.steps; ++s) {
    const Vec ha = matvec(p.hess, acc);
    for (size_t k = 0; k < acc.size(); ++k) acc[k] = p.grad[k] + acc[k] - p.eta * ha[k];
  }
  Vec out(acc.size());
  for (size_t k = 0; k < acc.size(); ++k) out[k] = -p.eta * acc[k];
  return out;
}

// Scalar per-eigendirection gain: (1 - (1 - eta*lambda)^S) / lambda, with the
// lambda -> 0 limit eta*S.
inline double q_filter(double lambda, double eta, int steps) {
  if (lambda == 0.0) return eta * steps;
  return (1.0 - std::pow(1.0 - eta * lambda, steps)) / lambda;
}

// Gaussian elimination with partial pivoting; used for the S -> infinity
// limit check against -H^{-1} g.
inline Vec solve_linear(Matrix a, Vec b) {
  const int n = a.rows;
  if (a.rows != a.cols || b.size() != static_cast<size_t>(n))
    throw DimensionError("solve_linear: shape mismatch");
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
    if (a.at(pivot, col) == 0.0) throw NumericError("solve_linear: singular matrix");
    if (pivot != col) {
      for (int c = 0; c < n; ++c) std::swap(a.at(pivot, c), a.at(col, c));
      std::swap(b[pivot], b[col]);
    }
    for (int r = col + 1; r < n; ++r) {
      const double f = a.at(r, col) / a.at(col, col);
      for (int c = col; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
      b[r] -= f * b[col];
    }
  }
  Vec x(n, 0.0);
  for (int r = n - 1; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < n; ++c) acc -= a.at(r, c) * x[c];
    x[r] = acc / a.at(r, r);
  }
  return x;
}

// H = M^T M / d: Gram construction guarantees PSD. `ridge` shifts the
// spectrum away from zero when strict positive-definiteness is needed.
inline Matrix make_random_psd(int d, Rng& rng, double ridge = 0.0) {
  Matrix m(d, d);
  for (double& v : m.data) v = rng.normal();
  Matrix h = matmul(transpose(m), m);
  for (double& v : h.data) v /= d;
  for (int i = 0; i < d; ++i) h.at(i, i) += ridge;
  // symmetrise away the last-ulp asymmetry of the float product
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double avg = 0.5 * (h.at(i, j) + h.at(j, i));
      h.at(i, j) = avg;
      h.at(j, i) = avg;
    }
  return h;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct GradcheckEntry {
  double* value = nullptr;
  double analytic = 0.0;
  std::string name;
};

struct GradcheckSpec {
  // Loss at the current parameter point.
  std::function<double()> loss;
  // Entries to probe, with their analytic gradients at the current point.
  std::function<std::vector<GradcheckEntry>()> entries;
  // Hash of every discrete decision in the loss (routing selections); a probe
  // is only trusted where this is invariant under the +-step perturbation.
  std::function<uint64_t()> signature;
  // Redraws the evaluation point after an unstable probe.
  std::function<void(int attempt)> resample;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_entry;
  int resamples = 0;
};

inline GradcheckResult run_gradcheck(const GradcheckSpec& spec, double step,
                                     int max_resamples = 10) {
  for (int attempt = 0; attempt <= max_resamples; ++attempt) {
    if (attempt > 0) spec.resample(attempt);
    GradcheckResult result;
    result.resamples = attempt;
    const uint64_t base_sig = spec.signature();
    bool stable = true;
    for (auto& entry : spec.entries()) {
      const double saved = *entry.value;
      *entry.value = saved + step;
      const uint64_t sig_plus = spec.signature();
      const double loss_plus = spec.loss();
      *entry.value = saved - step;
      const uint64_t sig_minus = spec.signature();
      const double loss_minus = spec.loss();
      *entry.value = saved;
      if (sig_plus != base_sig || sig_minus != base_sig) {
        stable = false;
        break;
      }
      const double numeric = (loss_plus - loss_minus) / (2.0 * step);
      const double rel = std::abs(entry.analytic - numeric) /
                         std::max({std::abs(entry.analytic), std::abs(numeric), 1e-8});
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_entry = entry.name;
      }
    }
    if (stable) return result;
  }
  throw Error("gradcheck: routing selection unstable at every resampled point");
}

}  // namespace cpmoe
