#pragma once

// Dense row-major double-precision primitives shared by every module.
// Accumulation order is fixed (row-major, left to right) so that seeded
// runs reproduce bit-identically on a single thread.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpmoe {

using Vec = std::vector<double>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Shape/usage violations (bad input, bad config): CLI exit code 1.
struct ConfigError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
// NaN/Inf escaped a computation: CLI exit code 2.
struct NumericError : Error { using Error::Error; };
// Filesystem failures: CLI exit code 3.
struct IoError : Error { using Error::Error; };

struct Matrix {
  int rows = 0;
  int cols = 0;
  Vec data;  // row-major, data.size() == rows*cols

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
    if (r < 0 || c < 0) throw DimensionError("matrix: negative shape");
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const { return std::to_string(rows) + "x" + std::to_string(cols); }
};

inline void require_finite(const double* p, size_t n, const char* op) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) throw NumericError(std::string(op) + ": non-finite entry");
}
inline void require_finite(const Matrix& m, const char* op) {
  require_finite(m.data.data(), m.size(), op);
}
inline void require_finite(const Vec& v, const char* op) {
  require_finite(v.data(), v.size(), op);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw DimensionError("matmul: " + a.shape_str() + " incompatible with " + b.shape_str());
  Matrix out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a.at(i, k);
      for (int j = 0; j < b.cols; ++j) out.at(i, j) += aik * b.at(k, j);
    }
  }
  require_finite(out, "matmul");
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols, m.rows);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
  return out;
}

// out = m * v
inline Vec matvec(const Matrix& m, const Vec& v) {
  if (static_cast<size_t>(m.cols) != v.size())
    throw DimensionError("matvec: " + m.shape_str() + " incompatible with vector of length " +
                         std::to_string(v.size()));
  Vec out(m.rows, 0.0);
  for (int i = 0; i < m.rows; ++i) {
    double acc = 0.0;
    for (int j = 0; j < m.cols; ++j) acc += m.at(i, j) * v[j];
    out[i] = acc;
  }
  return out;
}

// out_j = sum_k v_k * m(k, j), i.e. v^T m
inline Vec matvec_transposed(const Matrix& m, const Vec& v) {
  if (static_cast<size_t>(m.rows) != v.size())
    throw DimensionError("matvec_transposed: " + m.shape_str() +
                         " incompatible with vector of length " + std::to_string(v.size()));
  Vec out(m.cols, 0.0);
  for (int k = 0; k < m.rows; ++k) {
    const double vk = v[k];
    for (int j = 0; j < m.cols; ++j) out[j] += vk * m.at(k, j);
  }
  return out;
}

// m += scale * u v^T
inline void outer_add(Matrix& m, const Vec& u, const Vec& v, double scale = 1.0) {
  if (static_cast<size_t>(m.rows) != u.size() || static_cast<size_t>(m.cols) != v.size())
    throw DimensionError("outer_add: " + m.shape_str() + " incompatible with " +
                         std::to_string(u.size()) + "," + std::to_string(v.size()));
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) m.at(i, j) += scale * u[i] * v[j];
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size())
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline void add_scaled(Vec& dst, const Vec& src, double scale) {
  if (dst.size() != src.size()) throw DimensionError("add_scaled: length mismatch");
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

// Max-subtracted softmax; stable under arbitrarily large logits.
inline Vec softmax(const Vec& v) {
  if (v.empty()) throw DimensionError("softmax: empty input");
  require_finite(v, "softmax");
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  Vec out(v.size());
  double sum = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline double log_sum_exp(const Vec& v) {
  if (v.empty()) throw DimensionError("log_sum_exp: empty input");
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

// Subtracts the per-column mean. Needs at least two rows to be meaningful.
inline Matrix center_columns(const Matrix& z) {
  if (z.rows < 2) throw DimensionError("center_columns: need at least 2 rows, got " +
                                       std::to_string(z.rows));
  Matrix out(z.rows, z.cols);
  for (int j = 0; j < z.cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < z.rows; ++i) mean += z.at(i, j);
    mean /= z.rows;
    for (int i = 0; i < z.rows; ++i) out.at(i, j) = z.at(i, j) - mean;
  }
  return out;
}

inline double frobenius_inner(const Matrix& u, const Matrix& v) {
  if (!u.same_shape(v))
    throw DimensionError("frobenius_inner: shape mismatch " + u.shape_str() + " vs " +
                         v.shape_str());
  double acc = 0.0;
  for (size_t i = 0; i < u.size(); ++i) acc += u.data[i] * v.data[i];
  return acc;
}

inline double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_inner(m, m)); }

// Ties resolve to the lowest index.
inline int argmax_lowest(const Vec& v) {
  if (v.empty()) throw DimensionError("argmax: empty input");
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

// FNV-1a over raw IEEE-754 bytes; used for frozen-parameter invariant checks.
struct Fnv1a {
  uint64_t state = 1469598103934665603ULL;

  void add_bytes(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      state ^= b[i];
      state *= 1099511628211ULL;
    }
  }
  void add(double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    add_bytes(&bits, sizeof(bits));
  }
  void add(const Vec& v) {
    for (double d : v) add(d);
  }
  void add(const Matrix& m) {
    add_bytes(&m.rows, sizeof(m.rows));
    add_bytes(&m.cols, sizeof(m.cols));
    add(m.data);
  }
  uint64_t value() const { return state; }
};

// Shortest exact decimal form: parses back to the identical double and
// reprints byte-identically, which the checkpoint format relies on.
inline std::string format_double(double d) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

}  // namespace cpmoe
