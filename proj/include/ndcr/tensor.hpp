#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/kernels/kernels.hpp"

namespace ndcr {

// Dense row-major matrix. Everything in the computation graph is 2-D; the
// M x L x d grids are stored flattened as (M*L) x d with proposition-major
// row order (row i*L + l holds pair (proposition i, image l)).
template <typename T>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {
    if (r < 0 || c < 0) throw ShapeError("tensor: negative dimension");
  }
  Tensor(int r, int c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c)
      throw ShapeError("tensor: data length does not match shape");
  }

  size_t size() const { return data.size(); }
  T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows, cols);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// C (+)= op(A) * op(B) with optional transposes. accumulate=false zeroes C
// first. (transA && transB) is not needed anywhere and is rejected.
template <typename T>
void matmul_into(Tensor<T>& c, const Tensor<T>& a, const Tensor<T>& b, bool transA, bool transB,
                 bool accumulate) {
  const int m = transA ? a.cols : a.rows;
  const int k = transA ? a.rows : a.cols;
  const int kb = transB ? b.cols : b.rows;
  const int n = transB ? b.rows : b.cols;
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree " + a.shape_str() + " vs " +
                     b.shape_str());
  if (c.rows != m || c.cols != n) throw ShapeError("matmul: bad output shape");
  if (!accumulate) c.fill(T(0));
  const size_t nc = static_cast<size_t>(n);
  if (!transA && !transB) {
    for (int i = 0; i < m; ++i) {
      T* crow = c.row(i);
      const T* arow = a.row(i);
      for (int p = 0; p < k; ++p) kernels::axpy<T>(nc, arow[p], b.row(p), crow);
    }
  } else if (!transA && transB) {
    for (int i = 0; i < m; ++i) {
      T* crow = c.row(i);
      const T* arow = a.row(i);
      for (int j = 0; j < n; ++j) crow[j] += kernels::dot<T>(arow, b.row(j), static_cast<size_t>(k));
    }
  } else if (transA && !transB) {
    for (int p = 0; p < k; ++p) {
      const T* arow = a.row(p);
      const T* brow = b.row(p);
      for (int i = 0; i < m; ++i) kernels::axpy<T>(nc, arow[i], brow, c.row(i));
    }
  } else {
    throw ShapeError("matmul: transA && transB unsupported");
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transA = false,
                 bool transB = false) {
  Tensor<T> c(transA ? a.cols : a.rows, transB ? b.rows : b.cols);
  matmul_into(c, a, b, transA, transB, true);
  return c;
}

}  // namespace ndcr
