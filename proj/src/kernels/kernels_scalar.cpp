#include "ndcr/kernels/kernels.hpp"

// Reference kernels. Plain loops, fixed left-to-right accumulation; the SIMD
// backends are equivalence-tested against these.

namespace ndcr::kernels::detail {

namespace {

template <typename T>
T dot_scalar(const T* a, const T* b, size_t n) {
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy_scalar(size_t n, T alpha, const T* x, T* y) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void add_scalar(size_t n, const T* a, const T* b, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_scalar(size_t n, const T* a, const T* b, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_scalar(size_t n, const T* a, const T* b, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void fma_scalar(size_t n, const T* a, const T* b, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

template <typename T>
void scale_scalar(size_t n, T alpha, const T* x, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <typename T>
T sum_scalar(const T* x, size_t n) {
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void relu_scalar(size_t n, const T* x, T* out) {
  for (size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_bwd_scalar(size_t n, const T* x, const T* dy, T* dx) {
  for (size_t i = 0; i < n; ++i) {
    if (x[i] > T(0)) dx[i] += dy[i];
  }
}

}  // namespace

template <typename T>
Table<T> scalar_table() {
  Table<T> t;
  t.dot = dot_scalar<T>;
  t.axpy = axpy_scalar<T>;
  t.add = add_scalar<T>;
  t.sub = sub_scalar<T>;
  t.mul = mul_scalar<T>;
  t.fma = fma_scalar<T>;
  t.scale = scale_scalar<T>;
  t.sum = sum_scalar<T>;
  t.relu = relu_scalar<T>;
  t.relu_bwd = relu_bwd_scalar<T>;
  return t;
}

template Table<float> scalar_table<float>();
template Table<double> scalar_table<double>();

}  // namespace ndcr::kernels::detail
