#pragma once

// The adapted classifier: a frozen two-layer MLP whose first linear block
// carries a pool of low-rank experts with top-K routing. Forward traces keep
// everything the hand-derived backward pass needs; the top-K selection is
// treated as constant in backward and gradients flow through the restricted
// softmax only.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "cpmoe/numerics.hpp"
#include "cpmoe/rng.hpp"

namespace cpmoe {

struct ModelConfig {
  int d_in = 32;
  int d_hidden = 64;
  int n_classes = 4;
  int n_experts = 8;
  int expert_rank = 4;
  int top_k = 2;
  double lora_scale = -1.0;  // < 0 resolves to expert_rank, i.e. scale/rank == 1
  double lora_dropout = 0.1;
  double cp_bias_strength = 0.2;  // routing-bias alpha; distinct from lora_scale
  double lambda = 5e3;
  double gamma = 0.1;
  double warmup_lr = 0.2;
  int warmup_samples = 512;
  int warmup_batch = 32;
  double damping = 1e-3;  // xi in the importance normalisation
  double backbone_scale = 1e-3;
  double router_scale = 0.2;  // init bound for the gate; sets the native logit scale
  uint64_t seed = 1;

  double resolved_lora_scale() const { return lora_scale < 0.0 ? double(expert_rank) : lora_scale; }

  void validate() const {
    if (d_in < 1 || d_hidden < 1 || n_classes < 2)
      throw ConfigError("model: d_in/d_hidden/n_classes out of range");
    if (n_experts < 1) throw ConfigError("model: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts)
      throw ConfigError("model: top_k must satisfy 1 <= top_k <= n_experts (top_k=" +
                        std::to_string(top_k) + ", n_experts=" + std::to_string(n_experts) + ")");
    if (expert_rank < 1) throw ConfigError("model: expert_rank must be >= 1");
    if (expert_rank > std::min(d_in, d_hidden) / 2)
      throw ConfigError("model: expert_rank must be <= min(d_in, d_hidden)/2");
    if (lora_dropout < 0.0 || lora_dropout >= 1.0)
      throw ConfigError("model: lora_dropout must be in [0, 1)");
    if (cp_bias_strength < 0.0) throw ConfigError("model: cp_bias_strength must be >= 0");
    if (lambda < 0.0 || gamma < 0.0) throw ConfigError("model: lambda/gamma must be >= 0");
    if (warmup_lr <= 0.0) throw ConfigError("model: warmup_lr must be > 0");
    if (warmup_samples < 1 || warmup_batch < 1)
      throw ConfigError("model: warmup_samples/warmup_batch must be >= 1");
    if (damping <= 0.0) throw ConfigError("model: damping must be > 0");
    if (backbone_scale <= 0.0) throw ConfigError("model: backbone_scale must be > 0");
    if (router_scale <= 0.0) throw ConfigError("model: router_scale must be > 0");
  }
};

// Frozen after construction; hash-stable across a whole run.
struct FrozenBackbone {
  Matrix w1;  // d_hidden x d_in
  Vec b1;     // d_hidden
  Matrix w2;  // n_classes x d_hidden
  Vec b2;     // n_classes, kept zero so the frozen head carries no class prior
  bool frozen = true;

  uint64_t param_hash() const {
    Fnv1a h;
    h.add(w1);
    h.add(b1);
    h.add(w2);
    h.add(b2);
    return h.value();
  }
};

struct LoraExpert {
  Matrix a;  // rank x d_in
  Matrix b;  // d_out x rank
};

struct Router {
  Matrix w_gate;  // d_in x n_experts
};

struct MoeLayer {
  std::vector<LoraExpert> experts;
  Router router;
  double lora_scale = 1.0;
  int rank = 1;
};

struct RoutingDecision {
  std::vector<int> selected;  // top-K indices, logit-descending, ties to lowest index
  Vec weights;                // length n; zero off the selected set, sums to 1 on it
  Vec native_logits;          // length n
  Vec native_probs;           // softmax of native logits
  Vec biased_logits;          // native + alpha * h
};

struct Model {
  ModelConfig cfg;
  FrozenBackbone backbone;
  MoeLayer layer;
};

// --------------------------------------------------------------------------
// construction

inline LoraExpert make_lora_expert(int rank, int d_in, int d_out, Rng& rng) {
  LoraExpert e;
  e.a = Matrix(rank, d_in);
  const double bound = 1.0 / std::sqrt(double(d_in));
  for (double& v : e.a.data) v = rng.uniform(-bound, bound);
  e.b = Matrix(d_out, rank);  // zero: the expert starts with no effect
  return e;
}

inline Model make_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.backbone.w1 = Matrix(cfg.d_hidden, cfg.d_in);
  const double s1 = cfg.backbone_scale / std::sqrt(double(cfg.d_in));
  for (double& v : m.backbone.w1.data) v = rng.normal() * s1;
  m.backbone.b1.resize(cfg.d_hidden);
  for (double& v : m.backbone.b1) v = rng.normal() * cfg.backbone_scale;
  m.backbone.w2 = Matrix(cfg.n_classes, cfg.d_hidden);
  const double s2 = 1.0 / std::sqrt(double(cfg.d_hidden));
  for (double& v : m.backbone.w2.data) v = rng.normal() * s2;
  m.backbone.b2.assign(cfg.n_classes, 0.0);

  m.layer.rank = cfg.expert_rank;
  m.layer.lora_scale = cfg.resolved_lora_scale();
  m.layer.experts.reserve(cfg.n_experts);
  for (int i = 0; i < cfg.n_experts; ++i)
    m.layer.experts.push_back(make_lora_expert(cfg.expert_rank, cfg.d_in, cfg.d_hidden, rng));

  // Native logits start at O(1) so the additive consistency bias acts as a
  // prior rather than overriding input-dependent routing outright.
  m.layer.router.w_gate = Matrix(cfg.d_in, cfg.n_experts);
  for (double& v : m.layer.router.w_gate.data)
    v = rng.uniform(-cfg.router_scale, cfg.router_scale);
  return m;
}

inline uint64_t trainable_hash(const Model& m) {
  Fnv1a h;
  for (const auto& e : m.layer.experts) {
    h.add(e.a);
    h.add(e.b);
  }
  h.add(m.layer.router.w_gate);
  return h.value();
}

// --------------------------------------------------------------------------
// forward

inline Vec expert_forward(const LoraExpert& e, const Vec& x) {
  return matvec(e.b, matvec(e.a, x));
}

inline std::pair<Vec, Vec> native_logits_and_probs(const Router& r, const Vec& x) {
  Vec s = matvec_transposed(r.w_gate, x);
  return {s, softmax(s)};
}

inline Vec apply_cp_bias(const Vec& logits, const Vec& consistency, double alpha) {
  if (logits.size() != consistency.size())
    throw DimensionError("apply_cp_bias: " + std::to_string(logits.size()) + " logits vs " +
                         std::to_string(consistency.size()) + " scores");
  if (alpha < 0.0) throw ConfigError("apply_cp_bias: alpha must be >= 0");
  Vec out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] + alpha * consistency[i];
  return out;
}

// Indices of the K largest entries, logit-descending, ties to the lowest index.
inline std::vector<int> topk_indices(const Vec& logits, int k) {
  const int n = static_cast<int>(logits.size());
  if (k > n)
    throw DimensionError("route_topk: K=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  if (k < 1) throw DimensionError("route_topk: K must be >= 1");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  order.resize(k);
  return order;
}

inline RoutingDecision route_topk(const Vec& biased_logits, int k) {
  RoutingDecision d;
  d.biased_logits = biased_logits;
  d.selected = topk_indices(biased_logits, k);
  d.weights.assign(biased_logits.size(), 0.0);
  // softmax restricted to the selected set, max-subtracted
  double mx = biased_logits[d.selected[0]];
  double sum = 0.0;
  Vec e(d.selected.size());
  for (size_t i = 0; i < d.selected.size(); ++i) {
    e[i] = std::exp(biased_logits[d.selected[i]] - mx);
    sum += e[i];
  }
  for (size_t i = 0; i < d.selected.size(); ++i) d.weights[d.selected[i]] = e[i] / sum;
  return d;
}

struct ForwardOptions {
  const Vec* cp_bias = nullptr;            // consistency scores; null means no bias
  const LoraExpert* transient = nullptr;   // attached only during warm-up
  const Vec* dropout_mask = nullptr;       // expert-path mask, entries 0 or 1/(1-p)
};

struct MoeForwardCache {
  RoutingDecision route;
  Vec x_expert;            // dropout-applied expert-path input
  std::vector<Vec> a;      // A_i x_expert, parallel to route.selected
  std::vector<Vec> e;      // B_i a_i, parallel to route.selected
  Vec a_te, e_te;          // transient branch, empty when absent
  Vec z;                   // adapted block output
};

// The layer-level forward: frozen block output plus the gated expert sum.
// `k` and `alpha` come from the model config; kept explicit so probe and
// test code can drive the layer directly.
inline MoeForwardCache moe_forward(const MoeLayer& layer, const Matrix& w1,
                                   const Vec& b1, const Vec& x, int k, double alpha,
                                   const ForwardOptions& opt) {
  MoeForwardCache c;
  if (opt.dropout_mask) {
    if (opt.dropout_mask->size() != x.size())
      throw DimensionError("moe_forward: dropout mask length mismatch");
    c.x_expert.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) c.x_expert[i] = x[i] * (*opt.dropout_mask)[i];
  } else {
    c.x_expert = x;
  }

  auto [logits, probs] = native_logits_and_probs(layer.router, x);
  const Vec biased = opt.cp_bias ? apply_cp_bias(logits, *opt.cp_bias, alpha) : logits;
  c.route = route_topk(biased, k);
  c.route.native_logits = std::move(logits);
  c.route.native_probs = std::move(probs);

  c.z = matvec(w1, x);
  add_scaled(c.z, b1, 1.0);

  const double scale = layer.lora_scale / double(layer.rank);
  c.a.resize(c.route.selected.size());
  c.e.resize(c.route.selected.size());
  for (size_t s = 0; s < c.route.selected.size(); ++s) {
    const int i = c.route.selected[s];
    c.a[s] = matvec(layer.experts[i].a, c.x_expert);
    c.e[s] = matvec(layer.experts[i].b, c.a[s]);
    add_scaled(c.z, c.e[s], scale * c.route.weights[i]);
  }
  if (opt.transient) {
    c.a_te = matvec(opt.transient->a, c.x_expert);
    c.e_te = matvec(opt.transient->b, c.a_te);
    add_scaled(c.z, c.e_te, scale);
  }
  return c;
}

struct ForwardTrace {
  Vec x;
  MoeForwardCache block;
  Vec hidden;  // tanh of block output
  Vec logits;
  Vec probs;
};

inline ForwardTrace model_forward(const Model& m, const Vec& x, const ForwardOptions& opt) {
  if (x.size() != static_cast<size_t>(m.cfg.d_in))
    throw DimensionError("model_forward: input length " + std::to_string(x.size()) +
                         " vs d_in " + std::to_string(m.cfg.d_in));
  ForwardTrace t;
  t.x = x;
  t.block = moe_forward(m.layer, m.backbone.w1, m.backbone.b1, x, m.cfg.top_k,
                        m.cfg.cp_bias_strength, opt);
  t.hidden.resize(t.block.z.size());
  for (size_t i = 0; i < t.hidden.size(); ++i) t.hidden[i] = std::tanh(t.block.z[i]);
  t.logits = matvec(m.backbone.w2, t.hidden);
  add_scaled(t.logits, m.backbone.b2, 1.0);
  t.probs = softmax(t.logits);
  return t;
}

// Mean negative log-likelihood of the correct class; the |Y|=1 case of the
// sequence loss.
inline double task_loss(const Model& m, const std::vector<Vec>& xs, const std::vector<int>& ys,
                        const ForwardOptions& opt = {}) {
  if (xs.empty() || xs.size() != ys.size())
    throw DimensionError("task_loss: empty or mismatched batch");
  double total = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (ys[i] < 0 || ys[i] >= m.cfg.n_classes)
      throw DimensionError("task_loss: label " + std::to_string(ys[i]) + " out of range [0, " +
                           std::to_string(m.cfg.n_classes) + ")");
    const ForwardTrace t = model_forward(m, xs[i], opt);
    total += log_sum_exp(t.logits) - t.logits[ys[i]];
  }
  return total / double(xs.size());
}

// --------------------------------------------------------------------------
// backward (task term)

struct ParamGrads {
  std::vector<Matrix> a;  // per expert
  std::vector<Matrix> b;
  Matrix w_gate;

  static ParamGrads zeros_like(const Model& m) {
    ParamGrads g;
    g.a.reserve(m.layer.experts.size());
    g.b.reserve(m.layer.experts.size());
    for (const auto& e : m.layer.experts) {
      g.a.emplace_back(e.a.rows, e.a.cols);
      g.b.emplace_back(e.b.rows, e.b.cols);
    }
    g.w_gate = Matrix(m.layer.router.w_gate.rows, m.layer.router.w_gate.cols);
    return g;
  }
};

struct TaskBatchResult {
  double loss = 0.0;
  ParamGrads grads;
  std::vector<ForwardTrace> traces;
};

// dL/dz for one sample given its trace; shared by the stable and transient
// backward passes.
inline Vec loss_dz(const Model& m, const ForwardTrace& t, int label, double inv_batch) {
  Vec dlogits = t.probs;
  dlogits[label] -= 1.0;
  for (double& v : dlogits) v *= inv_batch;
  Vec dh = matvec_transposed(m.backbone.w2, dlogits);
  Vec dz(dh.size());
  for (size_t i = 0; i < dz.size(); ++i) dz[i] = dh[i] * (1.0 - t.hidden[i] * t.hidden[i]);
  return dz;
}

// Mean cross-entropy over the batch plus gradients for experts and router.
// Dropout masks, when given, are per-sample and already inverted-scaled.
inline TaskBatchResult task_loss_and_grads(const Model& m, const std::vector<Vec>& xs,
                                           const std::vector<int>& ys, const Vec* cp_bias,
                                           const std::vector<Vec>* dropout_masks = nullptr) {
  if (xs.empty() || xs.size() != ys.size())
    throw DimensionError("task_loss_and_grads: empty or mismatched batch");
  TaskBatchResult r;
  r.grads = ParamGrads::zeros_like(m);
  r.traces.reserve(xs.size());
  const double inv_batch = 1.0 / double(xs.size());
  const double scale = m.layer.lora_scale / double(m.layer.rank);

  for (size_t s = 0; s < xs.size(); ++s) {
    if (ys[s] < 0 || ys[s] >= m.cfg.n_classes)
      throw DimensionError("task_loss_and_grads: label out of range");
    ForwardOptions opt;
    opt.cp_bias = cp_bias;
    if (dropout_masks) opt.dropout_mask = &(*dropout_masks)[s];
    ForwardTrace t = model_forward(m, xs[s], opt);
    r.loss += (log_sum_exp(t.logits) - t.logits[ys[s]]) * inv_batch;

    const Vec dz = loss_dz(m, t, ys[s], inv_batch);
    const auto& sel = t.block.route.selected;
    Vec dgate(sel.size(), 0.0);
    for (size_t k = 0; k < sel.size(); ++k) {
      const int i = sel[k];
      const double gi = t.block.route.weights[i];
      // expert path
      Vec de(dz.size());
      for (size_t j = 0; j < dz.size(); ++j) de[j] = scale * gi * dz[j];
      outer_add(r.grads.b[i], de, t.block.a[k]);
      outer_add(r.grads.a[i], matvec_transposed(m.layer.experts[i].b, de), t.block.x_expert);
      // gate path
      dgate[k] = scale * dot(t.block.e[k], dz);
    }
    // restricted softmax backward: dL/ds_i = g_i (dL/dg_i - sum_j dL/dg_j g_j)
    double mix = 0.0;
    for (size_t k = 0; k < sel.size(); ++k) mix += dgate[k] * t.block.route.weights[sel[k]];
    for (size_t k = 0; k < sel.size(); ++k) {
      const int i = sel[k];
      const double ds = t.block.route.weights[i] * (dgate[k] - mix);
      for (int row = 0; row < r.grads.w_gate.rows; ++row)
        r.grads.w_gate.at(row, i) += ds * xs[s][row];
    }
    r.traces.push_back(std::move(t));
  }
  return r;
}

// Warm-up backward: gradients with respect to the transient branch only; the
// stable experts, router, and backbone stay untouched.
struct TransientGrads {
  double loss = 0.0;
  Matrix a, b;
};

inline TransientGrads transient_loss_and_grads(const Model& m, const LoraExpert& te,
                                               const std::vector<Vec>& xs,
                                               const std::vector<int>& ys) {
  if (xs.empty() || xs.size() != ys.size())
    throw DimensionError("transient_loss_and_grads: empty or mismatched batch");
  TransientGrads r;
  r.a = Matrix(te.a.rows, te.a.cols);
  r.b = Matrix(te.b.rows, te.b.cols);
  const double inv_batch = 1.0 / double(xs.size());
  const double scale = m.layer.lora_scale / double(m.layer.rank);
  ForwardOptions opt;
  opt.transient = &te;  // no CP bias and no dropout during warm-up

  for (size_t s = 0; s < xs.size(); ++s) {
    const ForwardTrace t = model_forward(m, xs[s], opt);
    r.loss += (log_sum_exp(t.logits) - t.logits[ys[s]]) * inv_batch;
    Vec dz = loss_dz(m, t, ys[s], inv_batch);
    for (double& v : dz) v *= scale;  // d z / d e_te = scale
    outer_add(r.b, dz, t.block.a_te);
    outer_add(r.a, matvec_transposed(te.b, dz), t.block.x_expert);
  }
  require_finite(r.a, "transient gradients");
  require_finite(r.b, "transient gradients");
  return r;
}

// --------------------------------------------------------------------------
// parameter accounting

struct ModuleDims {
  long long in = 0;
  long long out = 0;
  int count = 1;
};

struct ArchSpec {
  int layers = 1;
  long long rank = 1;     // total low-rank budget, split across experts
  long long experts = 1;  // rank per expert is rank/experts
  std::vector<ModuleDims> modules;
};

// Per module: pooled experts r(in+out), the transient branch (r/E)(in+out),
// and the gate in*E. Exact integer arithmetic.
inline unsigned long long count_trainable_params(const ArchSpec& arch) {
  if (arch.experts < 1 || arch.rank < 1)
    throw ConfigError("count_trainable_params: rank and experts must be >= 1");
  if (arch.rank % arch.experts != 0)
    throw ConfigError("count_trainable_params: experts (" + std::to_string(arch.experts) +
                      ") must divide rank (" + std::to_string(arch.rank) + ")");
  const long long rank_per_expert = arch.rank / arch.experts;
  unsigned long long per_layer = 0;
  for (const auto& mod : arch.modules) {
    const unsigned long long pool = static_cast<unsigned long long>(arch.rank) * (mod.in + mod.out);
    const unsigned long long transient =
        static_cast<unsigned long long>(rank_per_expert) * (mod.in + mod.out);
    const unsigned long long gate =
        static_cast<unsigned long long>(mod.in) * static_cast<unsigned long long>(arch.experts);
    per_layer += (pool + transient + gate) * static_cast<unsigned long long>(mod.count);
  }
  return per_layer * static_cast<unsigned long long>(arch.layers);
}

inline ArchSpec desk_arch(const ModelConfig& cfg) {
  ArchSpec a;
  a.layers = 1;
  a.experts = cfg.n_experts;
  a.rank = static_cast<long long>(cfg.n_experts) * cfg.expert_rank;
  a.modules = {{cfg.d_in, cfg.d_hidden, 1}};
  return a;
}

}  // namespace cpmoe
