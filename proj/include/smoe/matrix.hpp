#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace smoe {

// Dense row-major matrix of doubles. All model math is 2-D; batched token
// representations are stored as one row per token.
struct RealMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  bool same_shape(const RealMatrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline std::string shape_str(const RealMatrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

// out += a * b
inline void matmul_acc(RealMatrix& out, const RealMatrix& a, const RealMatrix& b) {
  require(a.cols == b.rows, "matmul: inner dims " + shape_str(a) + " vs " + shape_str(b));
  require(out.rows == a.rows && out.cols == b.cols, "matmul: output shape");
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T
inline void matmul_nt_acc(RealMatrix& out, const RealMatrix& a, const RealMatrix& b) {
  require(a.cols == b.cols, "matmul_nt: inner dims " + shape_str(a) + " vs " + shape_str(b));
  require(out.rows == a.rows && out.cols == b.rows, "matmul_nt: output shape");
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      orow[j] += s;
    }
  }
}

// out += a^T * b
inline void matmul_tn_acc(RealMatrix& out, const RealMatrix& a, const RealMatrix& b) {
  require(a.rows == b.rows, "matmul_tn: inner dims " + shape_str(a) + " vs " + shape_str(b));
  require(out.rows == a.cols && out.cols == b.cols, "matmul_tn: output shape");
  for (int k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.row(i);
      for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

inline RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix out(a.rows, b.cols);
  matmul_acc(out, a, b);
  return out;
}

inline RealMatrix matmul_nt(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix out(a.rows, b.rows);
  matmul_nt_acc(out, a, b);
  return out;
}

inline RealMatrix matmul_tn(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix out(a.cols, b.cols);
  matmul_tn_acc(out, a, b);
  return out;
}

inline void add_acc(RealMatrix& out, const RealMatrix& a, double scale = 1.0) {
  require(out.same_shape(a), "add_acc: shape " + shape_str(out) + " vs " + shape_str(a));
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += scale * a.data[i];
}

inline double frobenius_norm(const RealMatrix& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

}  // namespace smoe
