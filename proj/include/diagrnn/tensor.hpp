#pragma once

#include <cassert>
#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

#include "diagrnn/errors.hpp"

namespace diagrnn {

inline std::string shape_str(int rows, int cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

// Dense row-major 2-D matrix of doubles. The single value type for inputs,
// activations, parameters and gradients.
class Tensor {
 public:
  Tensor() = default;

  Tensor(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw DimensionError("tensor: negative shape " + shape_str(rows, cols));
  }

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols, 0.0); }
  static Tensor ones(int rows, int cols) { return Tensor(rows, cols, 1.0); }
  static Tensor full(int rows, int cols, double v) { return Tensor(rows, cols, v); }

  static Tensor identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
    Tensor t(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c)
        throw DimensionError("tensor literal: ragged rows");
      int j = 0;
      for (double v : row) t.at(i, j++) = v;
      ++i;
    }
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  long size() const { return static_cast<long>(rows_) * cols_; }
  bool empty() const { return data_.empty(); }

  double& at(int r, int c) {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  double at(int r, int c) const {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }

  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape() const { return shape_str(rows_, cols_); }

  // Same storage reinterpreted with a new shape; element count must match.
  Tensor reshaped(int rows, int cols) const {
    if (static_cast<long>(rows) * cols != size())
      throw DimensionError("reshape " + shape() + " -> " + shape_str(rows, cols));
    Tensor t = *this;
    t.rows_ = rows;
    t.cols_ = cols;
    return t;
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  double sum() const {
    double s = 0.0;
    for (double x : data_) s += x;
    return s;
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  double m = 0.0;
  for (long i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Rows [r0, r1) as a new tensor.
inline Tensor slice_rows(const Tensor& t, int r0, int r1) {
  assert(r0 >= 0 && r1 >= r0 && r1 <= t.rows());
  Tensor out(r1 - r0, t.cols());
  for (int r = r0; r < r1; ++r)
    for (int c = 0; c < t.cols(); ++c) out.at(r - r0, c) = t.at(r, c);
  return out;
}

}  // namespace diagrnn
