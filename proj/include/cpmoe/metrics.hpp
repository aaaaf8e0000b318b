#pragma once

// Accuracy-matrix bookkeeping and the three stream summary metrics.
// R[j][t] is accuracy on task j after training task t; seen rows first,
// then unseen rows.

#include <cstdio>
#include <string>
#include <vector>

#include "cpmoe/numerics.hpp"

namespace cpmoe {

struct AccuracyMatrix {
  int n_seen = 0;
  int n_unseen = 0;
  std::vector<std::vector<double>> values;  // (n_seen+n_unseen) x n_seen
  std::vector<std::vector<bool>> filled;

  AccuracyMatrix() = default;
  AccuracyMatrix(int seen, int unseen)
      : n_seen(seen),
        n_unseen(unseen),
        values(seen + unseen, std::vector<double>(seen, 0.0)),
        filled(seen + unseen, std::vector<bool>(seen, false)) {}

  int rows() const { return n_seen + n_unseen; }

  void set(int task_row, int stage, double accuracy) {
    if (accuracy < 0.0 || accuracy > 1.0)
      throw NumericError("accuracy matrix: value outside [0, 1]");
    values[task_row][stage] = accuracy;
    filled[task_row][stage] = true;
  }

  bool final_column_complete() const {
    if (n_seen == 0) return false;
    for (int j = 0; j < rows(); ++j)
      if (!filled[j][n_seen - 1]) return false;
    return true;
  }
};

// Mean final-stage accuracy over seen tasks.
inline double average_performance(const AccuracyMatrix& m) {
  if (!m.final_column_complete()) throw Error("average_performance: final column incomplete");
  double sum = 0.0;
  for (int j = 0; j < m.n_seen; ++j) sum += m.values[j][m.n_seen - 1];
  return sum / m.n_seen;
}

// Mean of R[j][j] - R[j][final] over tasks before the last one. Negative
// values mean backward transfer. Defined as 0 for single-task streams.
inline double average_forgetting(const AccuracyMatrix& m) {
  if (!m.final_column_complete()) throw Error("average_forgetting: final column incomplete");
  if (m.n_seen < 2) return 0.0;
  double sum = 0.0;
  for (int j = 0; j < m.n_seen - 1; ++j) sum += m.values[j][j] - m.values[j][m.n_seen - 1];
  return sum / (m.n_seen - 1);
}

// Alternative convention: drop from the best historical stage instead of the
// immediately-post-training stage; always >= 0. Reported alongside for
// transparency.
inline double average_forgetting_best_historical(const AccuracyMatrix& m) {
  if (!m.final_column_complete())
    throw Error("average_forgetting_best_historical: final column incomplete");
  if (m.n_seen < 2) return 0.0;
  double sum = 0.0;
  for (int j = 0; j < m.n_seen - 1; ++j) {
    double best = 0.0;
    for (int t = 0; t < m.n_seen; ++t)
      if (m.filled[j][t]) best = std::max(best, m.values[j][t]);
    sum += best - m.values[j][m.n_seen - 1];
  }
  return sum / (m.n_seen - 1);
}

// Mean final-stage accuracy over held-out tasks.
inline double zero_shot_transfer(const AccuracyMatrix& m) {
  if (m.n_unseen == 0) throw Error("zero_shot_transfer: no unseen tasks");
  if (!m.final_column_complete()) throw Error("zero_shot_transfer: final column incomplete");
  double sum = 0.0;
  for (int j = m.n_seen; j < m.rows(); ++j) sum += m.values[j][m.n_seen - 1];
  return sum / m.n_unseen;
}

// Fixed-point display format; matrix.json carries the exact values.
inline std::string matrix_to_csv(const AccuracyMatrix& m) {
  std::string out = "task,kind";
  for (int t = 0; t < m.n_seen; ++t) out += ",after_task_" + std::to_string(t + 1);
  out += "\n";
  char buf[32];
  for (int j = 0; j < m.rows(); ++j) {
    out += std::to_string(j + 1);
    out += (j < m.n_seen) ? ",seen" : ",unseen";
    for (int t = 0; t < m.n_seen; ++t) {
      if (m.filled[j][t]) {
        std::snprintf(buf, sizeof(buf), ",%.6f", m.values[j][t]);
        out += buf;
      } else {
        out += ",";
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace cpmoe
