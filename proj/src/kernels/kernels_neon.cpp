#if defined(__aarch64__)

#include <arm_neon.h>

#include "ndcr/kernels/kernels.hpp"

namespace ndcr::kernels::detail {

namespace {

float dot_f(const float* a, const float* b, size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(a + i), vld1q_f32(b + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_f(size_t n, float alpha, const float* x, float* y) {
  float32x4_t va = vdupq_n_f32(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vy = vld1q_f32(y + i);
    vy = vfmaq_f32(vy, va, vld1q_f32(x + i));
    vst1q_f32(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void add_f(size_t n, const float* a, const float* b, float* out) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_f(size_t n, const float* a, const float* b, float* out) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_f(size_t n, const float* a, const float* b, float* out) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void fma_f(size_t n, const float* a, const float* b, float* out) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vo = vld1q_f32(out + i);
    vo = vfmaq_f32(vo, vld1q_f32(a + i), vld1q_f32(b + i));
    vst1q_f32(out + i, vo);
  }
  for (; i < n; ++i) out[i] += a[i] * b[i];
}

void scale_f(size_t n, float alpha, const float* x, float* out) {
  float32x4_t va = vdupq_n_f32(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(va, vld1q_f32(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

float sum_f(const float* x, size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

void relu_f(size_t n, const float* x, float* out) {
  float32x4_t z = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmaxq_f32(z, vld1q_f32(x + i)));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_f(size_t n, const float* x, const float* dy, float* dx) {
  float32x4_t z = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    uint32x4_t mask = vcgtq_f32(vld1q_f32(x + i), z);
    float32x4_t contrib =
        vreinterpretq_f32_u32(vandq_u32(mask, vreinterpretq_u32_f32(vld1q_f32(dy + i))));
    vst1q_f32(dx + i, vaddq_f32(vld1q_f32(dx + i), contrib));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

double dot_d(const double* a, const double* b, size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_d(size_t n, double alpha, const double* x, double* y) {
  float64x2_t va = vdupq_n_f64(alpha);
  size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t vy = vld1q_f64(y + i);
    vy = vfmaq_f64(vy, va, vld1q_f64(x + i));
    vst1q_f64(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

template <>
Table<float> neon_table<float>() {
  Table<float> t;
  t.dot = dot_f;
  t.axpy = axpy_f;
  t.add = add_f;
  t.sub = sub_f;
  t.mul = mul_f;
  t.fma = fma_f;
  t.scale = scale_f;
  t.sum = sum_f;
  t.relu = relu_f;
  t.relu_bwd = relu_bwd_f;
  return t;
}

// Only the two hottest double kernels are vectorized on NEON; the rest reuse
// the scalar reference (doubles are used for gradient checks, not training).
template <>
Table<double> neon_table<double>() {
  Table<double> t = scalar_table<double>();
  t.dot = dot_d;
  t.axpy = axpy_d;
  return t;
}

}  // namespace ndcr::kernels::detail

#endif  // aarch64
