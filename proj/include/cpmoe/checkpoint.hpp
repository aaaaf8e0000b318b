#pragma once

// Self-describing text checkpoint, version-tagged, restricted to what a
// task-boundary resume needs: trainable parameters, consolidation state, the
// active routing bias, the training RNG, and the accuracy matrix so far.
// Doubles print as shortest exact decimals, so save -> load -> save is
// byte-identical and resume replays bit-exactly.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpmoe/numerics.hpp"
#include "cpmoe/trainer.hpp"

namespace cpmoe {

inline constexpr const char* kCheckpointHeader = "cpmoe-checkpoint v1";

namespace detail {

inline void write_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
  out << "tensor " << name << " " << m.rows << " " << m.cols << "\n";
  for (int i = 0; i < m.rows; ++i) {
    for (int j = 0; j < m.cols; ++j) out << (j ? " " : "") << format_double(m.at(i, j));
    out << "\n";
  }
}

inline void write_vec(std::ostream& out, const std::string& name, const Vec& v) {
  out << "vector " << name << " " << v.size() << "\n";
  for (size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_double(v[i]);
  out << "\n";
}

struct CheckpointReader {
  std::istream& in;
  std::string path;
  int line_no = 0;

  std::string next_line() {
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": truncated checkpoint");
    line_no++;
    return line;
  }

  Matrix read_matrix(const std::string& expected_name) {
    std::istringstream head(next_line());
    std::string tag, name;
    int rows = 0, cols = 0;
    head >> tag >> name >> rows >> cols;
    if (tag != "tensor" || name != expected_name || head.fail())
      throw IoError(path + ":" + std::to_string(line_no) + ": expected tensor " + expected_name);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
      std::istringstream row(next_line());
      for (int j = 0; j < cols; ++j) {
        row >> m.at(i, j);
        if (row.fail())
          throw IoError(path + ":" + std::to_string(line_no) + ": malformed tensor row");
      }
    }
    return m;
  }

  Vec read_vec(const std::string& expected_name) {
    std::istringstream head(next_line());
    std::string tag, name;
    size_t n = 0;
    head >> tag >> name >> n;
    if (tag != "vector" || name != expected_name || head.fail())
      throw IoError(path + ":" + std::to_string(line_no) + ": expected vector " + expected_name);
    Vec v(n);
    std::istringstream row(next_line());
    for (size_t i = 0; i < n; ++i) {
      row >> v[i];
      if (row.fail())
        throw IoError(path + ":" + std::to_string(line_no) + ": malformed vector row");
    }
    return v;
  }

  long long read_meta(const std::string& key) {
    std::istringstream head(next_line());
    std::string tag, name;
    long long value = 0;
    head >> tag >> name >> value;
    if (tag != "meta" || name != key || head.fail())
      throw IoError(path + ":" + std::to_string(line_no) + ": expected meta " + key);
    return value;
  }
};

}  // namespace detail

inline std::string checkpoint_to_text(const ContinualState& st) {
  std::ostringstream out;
  out << kCheckpointHeader << "\n";
  out << "meta master_seed " << st.cfg.seed << "\n";
  out << "meta task_cursor " << st.task_cursor << "\n";
  out << "meta n_experts " << st.cfg.n_experts << "\n";
  out << "meta d_in " << st.cfg.d_in << "\n";
  out << "meta d_hidden " << st.cfg.d_hidden << "\n";
  out << "meta n_classes " << st.cfg.n_classes << "\n";
  out << "meta expert_rank " << st.cfg.expert_rank << "\n";
  out << "meta cons_task_index " << st.cons.task_index << "\n";
  out << "rng " << st.train_rng.serialize() << "\n";
  detail::write_vec(out, "cka_bias", st.cka_bias);
  for (size_t i = 0; i < st.model.layer.experts.size(); ++i) {
    const std::string p = "expert." + std::to_string(i) + ".";
    detail::write_matrix(out, p + "A", st.model.layer.experts[i].a);
    detail::write_matrix(out, p + "B", st.model.layer.experts[i].b);
    detail::write_matrix(out, p + "omega_A", st.cons.experts[i].omega_a);
    detail::write_matrix(out, p + "omega_B", st.cons.experts[i].omega_b);
    out << "meta expert." << i << ".has_snapshot " << (st.cons.experts[i].has_snapshot ? 1 : 0)
        << "\n";
    if (st.cons.experts[i].has_snapshot) {
      detail::write_matrix(out, p + "A_old", st.cons.experts[i].a_old);
      detail::write_matrix(out, p + "B_old", st.cons.experts[i].b_old);
    }
  }
  detail::write_matrix(out, "router.W", st.model.layer.router.w_gate);
  out << "accmatrix " << st.matrix.n_seen << " " << st.matrix.n_unseen << "\n";
  for (int j = 0; j < st.matrix.rows(); ++j) {
    for (int t = 0; t < st.matrix.n_seen; ++t) {
      if (t) out << " ";
      out << (st.matrix.filled[j][t] ? format_double(st.matrix.values[j][t]) : "-");
    }
    out << "\n";
  }
  out << "end\n";
  return out.str();
}

inline void save_checkpoint(const std::string& path, const ContinualState& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write '" + path + "'");
  out << checkpoint_to_text(st);
  if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

// Restores a task-boundary checkpoint into a freshly initialised state. The
// frozen backbone is regenerated from the config seed; everything trainable
// comes from the file.
inline void load_checkpoint_into(const std::string& path, ContinualState& st) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  detail::CheckpointReader r{in, path};

  if (r.next_line() != kCheckpointHeader)
    throw IoError(path + ": not a cpmoe-checkpoint v1 file");
  const auto expect = [&](const char* key, long long want) {
    const long long got = r.read_meta(key);
    if (got != want)
      throw ConfigError(path + ": checkpoint " + key + "=" + std::to_string(got) +
                        " does not match the active config (" + std::to_string(want) + ")");
  };
  expect("master_seed", static_cast<long long>(st.cfg.seed));
  const long long cursor = r.read_meta("task_cursor");
  expect("n_experts", st.cfg.n_experts);
  expect("d_in", st.cfg.d_in);
  expect("d_hidden", st.cfg.d_hidden);
  expect("n_classes", st.cfg.n_classes);
  expect("expert_rank", st.cfg.expert_rank);
  st.cons.task_index = static_cast<int>(r.read_meta("cons_task_index"));

  std::string rng_line = r.next_line();
  if (rng_line.rfind("rng ", 0) != 0) throw IoError(path + ": expected rng state");
  st.train_rng.deserialize(rng_line.substr(4));

  st.cka_bias = r.read_vec("cka_bias");
  for (size_t i = 0; i < st.model.layer.experts.size(); ++i) {
    const std::string p = "expert." + std::to_string(i) + ".";
    st.model.layer.experts[i].a = r.read_matrix(p + "A");
    st.model.layer.experts[i].b = r.read_matrix(p + "B");
    st.cons.experts[i].omega_a = r.read_matrix(p + "omega_A");
    st.cons.experts[i].omega_b = r.read_matrix(p + "omega_B");
    const bool has_snapshot =
        r.read_meta("expert." + std::to_string(i) + ".has_snapshot") != 0;
    st.cons.experts[i].has_snapshot = has_snapshot;
    if (has_snapshot) {
      st.cons.experts[i].a_old = r.read_matrix(p + "A_old");
      st.cons.experts[i].b_old = r.read_matrix(p + "B_old");
    }
  }
  st.model.layer.router.w_gate = r.read_matrix("router.W");

  std::istringstream acc_head(r.next_line());
  std::string tag;
  int n_seen = 0, n_unseen = 0;
  acc_head >> tag >> n_seen >> n_unseen;
  if (tag != "accmatrix" || acc_head.fail()) throw IoError(path + ": expected accmatrix");
  if (n_seen != st.matrix.n_seen || n_unseen != st.matrix.n_unseen)
    throw ConfigError(path + ": accuracy-matrix shape does not match the active config");
  for (int j = 0; j < st.matrix.rows(); ++j) {
    std::istringstream row(r.next_line());
    for (int t = 0; t < n_seen; ++t) {
      std::string cell;
      row >> cell;
      if (row.fail()) throw IoError(path + ": malformed accmatrix row");
      if (cell == "-") {
        st.matrix.filled[j][t] = false;
      } else {
        st.matrix.values[j][t] = std::stod(cell);
        st.matrix.filled[j][t] = true;
      }
    }
  }
  if (r.next_line() != "end") throw IoError(path + ": missing end marker");
  st.task_cursor = static_cast<int>(cursor);
}

}  // namespace cpmoe
