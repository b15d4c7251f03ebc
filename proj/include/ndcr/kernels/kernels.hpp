#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops behind the tensor layer. Each primitive has a
// scalar reference implementation plus SIMD variants (AVX2 on x86-64, NEON on
// aarch64) selected once at startup. The NDCR_KERNELS environment variable
// ("scalar", "avx2", "neon") overrides auto-detection; tests use set_backend()
// to compare backends directly.
//
// SIMD variants may reassociate accumulation (FMA, lane-wise partial sums),
// so results agree with the scalar reference to rounding, not bitwise.
// Within one backend the accumulation order is fixed.

namespace ndcr::kernels {

enum class Backend { scalar, avx2, neon };

Backend active_backend();
const char* backend_name(Backend b);

// Throws ndcr::ConfigError if the backend is not available on this machine.
void set_backend(Backend b);
bool backend_available(Backend b);

template <typename T>
struct Table {
  T (*dot)(const T* a, const T* b, size_t n);
  void (*axpy)(size_t n, T alpha, const T* x, T* y);  // y += alpha * x
  void (*add)(size_t n, const T* a, const T* b, T* out);
  void (*sub)(size_t n, const T* a, const T* b, T* out);
  void (*mul)(size_t n, const T* a, const T* b, T* out);
  void (*fma)(size_t n, const T* a, const T* b, T* out);  // out += a * b
  void (*scale)(size_t n, T alpha, const T* x, T* out);
  T (*sum)(const T* x, size_t n);
  void (*relu)(size_t n, const T* x, T* out);
  // dx += dy where x > 0
  void (*relu_bwd)(size_t n, const T* x, const T* dy, T* dx);
};

// Active dispatch table for T in {float, double}.
template <typename T>
const Table<T>& table();

template <>
const Table<float>& table<float>();
template <>
const Table<double>& table<double>();

namespace detail {
template <typename T>
Table<T> scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
template <typename T>
Table<T> avx2_table();
template <>
Table<float> avx2_table<float>();
template <>
Table<double> avx2_table<double>();
#endif
#if defined(__aarch64__)
template <typename T>
Table<T> neon_table();
template <>
Table<float> neon_table<float>();
template <>
Table<double> neon_table<double>();
#endif
}  // namespace detail

// Convenience forwarding wrappers.
template <typename T>
inline T dot(const T* a, const T* b, size_t n) {
  return table<T>().dot(a, b, n);
}
template <typename T>
inline void axpy(size_t n, T alpha, const T* x, T* y) {
  table<T>().axpy(n, alpha, x, y);
}
template <typename T>
inline void add(size_t n, const T* a, const T* b, T* out) {
  table<T>().add(n, a, b, out);
}
template <typename T>
inline void sub(size_t n, const T* a, const T* b, T* out) {
  table<T>().sub(n, a, b, out);
}
template <typename T>
inline void mul(size_t n, const T* a, const T* b, T* out) {
  table<T>().mul(n, a, b, out);
}
template <typename T>
inline void fma(size_t n, const T* a, const T* b, T* out) {
  table<T>().fma(n, a, b, out);
}
template <typename T>
inline void scale(size_t n, T alpha, const T* x, T* out) {
  table<T>().scale(n, alpha, x, out);
}
template <typename T>
inline T sum(const T* x, size_t n) {
  return table<T>().sum(x, n);
}
template <typename T>
inline void relu(size_t n, const T* x, T* out) {
  table<T>().relu(n, x, out);
}
template <typename T>
inline void relu_bwd(size_t n, const T* x, const T* dy, T* dx) {
  table<T>().relu_bwd(n, x, dy, dx);
}

}  // namespace ndcr::kernels
