#pragma once

// Deterministic synthetic task streams. Every task places C class means
// equally spaced on a unit circle inside a shared 2-D subspace of R^d; the
// per-task rotation angle creates related-but-shifted distributions, which is
// what makes sequential fine-tuning forget. Unseen tasks sit at half-spacing
// offsets for the zero-shot measurement.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "cpmoe/numerics.hpp"
#include "cpmoe/rng.hpp"

namespace cpmoe {

struct TaskSpec {
  int task_id = 0;
  double angle = 0.0;  // radians, in [0, 2*pi)
  int classes = 2;
  double noise = 0.0;
  int train_size = 0;
  int test_size = 0;
};

struct Dataset {
  std::vector<Vec> x;
  std::vector<int> y;
  size_t size() const { return x.size(); }
};

struct TaskData {
  TaskSpec spec;
  Dataset train, test;
  double oracle_test_accuracy = 0.0;  // nearest-true-mean classifier on the test split
};

struct TaskStream {
  Matrix embedding;  // d x 2, orthonormal columns
  std::vector<TaskData> seen;
  std::vector<TaskData> unseen;
  uint64_t master_seed = 0;
  uint64_t stream_seed = 0;
  int dim = 0;
  int classes = 0;
  double noise = 0.0;
};

inline Vec class_mean(const Matrix& embedding, int cls, int classes, double angle) {
  const double theta = 2.0 * std::numbers::pi * cls / classes + angle;
  Vec mean(embedding.rows, 0.0);
  const double cx = std::cos(theta), cy = std::sin(theta);
  for (int i = 0; i < embedding.rows; ++i)
    mean[i] = embedding.at(i, 0) * cx + embedding.at(i, 1) * cy;
  return mean;
}

inline int nearest_mean_class(const Matrix& embedding, const TaskSpec& spec, const Vec& x) {
  int best = 0;
  double best_dist = 0.0;
  for (int c = 0; c < spec.classes; ++c) {
    const Vec mean = class_mean(embedding, c, spec.classes, spec.angle);
    double dist = 0.0;
    for (size_t k = 0; k < x.size(); ++k) {
      const double d = x[k] - mean[k];
      dist += d * d;
    }
    if (c == 0 || dist < best_dist) {
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

inline Dataset sample_dataset(const Matrix& embedding, const TaskSpec& spec, int count, Rng& rng) {
  Dataset d;
  d.x.reserve(count);
  d.y.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int cls = i % spec.classes;  // cyclic labels keep every prefix balanced
    Vec x = class_mean(embedding, cls, spec.classes, spec.angle);
    for (double& v : x) v += spec.noise * rng.normal();
    d.x.push_back(std::move(x));
    d.y.push_back(cls);
  }
  return d;
}

inline TaskData make_task(const Matrix& embedding, const TaskSpec& spec, uint64_t seed) {
  if (spec.train_size < spec.classes || spec.test_size < spec.classes)
    throw ConfigError("make_task: train/test sizes must be >= class count");
  Rng rng(seed);
  TaskData t;
  t.spec = spec;
  t.train = sample_dataset(embedding, spec, spec.train_size, rng);
  t.test = sample_dataset(embedding, spec, spec.test_size, rng);
  int correct = 0;
  for (size_t i = 0; i < t.test.size(); ++i)
    if (nearest_mean_class(embedding, spec, t.test.x[i]) == t.test.y[i]) correct++;
  t.oracle_test_accuracy = double(correct) / double(t.test.size());
  return t;
}

// Gram-Schmidt on two Gaussian columns.
inline Matrix make_embedding(int dim, Rng& rng) {
  Matrix q(dim, 2);
  Vec u(dim), v(dim);
  for (double& x : u) x = rng.normal();
  for (double& x : v) x = rng.normal();
  double nu = std::sqrt(dot(u, u));
  for (double& x : u) x /= nu;
  const double proj = dot(u, v);
  for (int i = 0; i < dim; ++i) v[i] -= proj * u[i];
  double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;
  for (int i = 0; i < dim; ++i) {
    q.at(i, 0) = u[i];
    q.at(i, 1) = v[i];
  }
  return q;
}

inline TaskStream make_stream(int dim, int classes, int n_seen, int n_unseen, double noise,
                              int train_size, int test_size, uint64_t master_seed) {
  if (dim < 2) throw ConfigError("make_stream: dim must be >= 2");
  if (classes < 2) throw ConfigError("make_stream: classes must be >= 2");
  if (n_seen < 1) throw ConfigError("make_stream: need at least one seen task");
  if (n_unseen < 0) throw ConfigError("make_stream: negative unseen count");
  if (noise < 0.0) throw ConfigError("make_stream: negative noise");

  TaskStream s;
  s.master_seed = master_seed;
  s.stream_seed = derive_seed(master_seed, SeedDomain::kStream);
  s.dim = dim;
  s.classes = classes;
  s.noise = noise;

  Rng rng(s.stream_seed);
  s.embedding = make_embedding(dim, rng);

  auto spec_for = [&](int id, double angle) {
    TaskSpec spec;
    spec.task_id = id;
    spec.angle = angle;
    spec.classes = classes;
    spec.noise = noise;
    spec.train_size = train_size;
    spec.test_size = test_size;
    return spec;
  };

  // Rotating by 2*pi/C maps the class means onto each other with permuted
  // labels, so distinct rotations live in the fundamental domain [0, 2*pi/C).
  // Seen angles tile that domain evenly; unseen ones sit at half-spacing
  // offsets so the two sets never coincide.
  const double domain = 2.0 * std::numbers::pi / classes;
  const double spacing = domain / n_seen;
  for (int t = 0; t < n_seen; ++t) {
    const uint64_t seed = splitmix64(s.stream_seed ^ splitmix64(0x5EEDULL + t));
    s.seen.push_back(make_task(s.embedding, spec_for(t + 1, t * spacing), seed));
  }
  for (int u = 0; u < n_unseen; ++u) {
    const double angle = spacing / 2.0 + u * (domain / std::max(1, n_unseen));
    const uint64_t seed = splitmix64(s.stream_seed ^ splitmix64(0xFEEDULL + u));
    s.unseen.push_back(make_task(s.embedding, spec_for(n_seen + u + 1, angle), seed));
  }
  return s;
}

// Seeded epoch shuffle over sample indices; every sample appears exactly once.
inline std::vector<std::vector<int>> batches(int n_samples, int batch_size, uint64_t epoch_seed) {
  if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  std::vector<int> order(n_samples);
  for (int i = 0; i < n_samples; ++i) order[i] = i;
  Rng rng(epoch_seed);
  rng.shuffle(order);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n_samples; start += batch_size) {
    const int stop = std::min(n_samples, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return out;
}

}  // namespace cpmoe
