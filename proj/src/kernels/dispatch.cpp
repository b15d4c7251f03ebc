#include <cstdlib>
#include <string>

#include "ndcr/common.hpp"
#include "ndcr/kernels/kernels.hpp"

namespace ndcr::kernels {

namespace {

Table<float> g_table_f;
Table<double> g_table_d;
Backend g_backend = Backend::scalar;
bool g_initialized = false;

Backend detect() {
  if (const char* env = std::getenv("NDCR_KERNELS")) {
    std::string s(env);
    if (s == "scalar") return Backend::scalar;
    if (s == "avx2") return Backend::avx2;
    if (s == "neon") return Backend::neon;
    throw ConfigError("NDCR_KERNELS: unknown backend '" + s + "'");
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Backend::avx2;
#elif defined(__aarch64__)
  return Backend::neon;
#endif
  return Backend::scalar;
}

void install(Backend b) {
  switch (b) {
    case Backend::scalar:
      g_table_f = detail::scalar_table<float>();
      g_table_d = detail::scalar_table<double>();
      break;
    case Backend::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      g_table_f = detail::avx2_table<float>();
      g_table_d = detail::avx2_table<double>();
      break;
#else
      throw ConfigError("avx2 backend not available on this platform");
#endif
    case Backend::neon:
#if defined(__aarch64__)
      g_table_f = detail::neon_table<float>();
      g_table_d = detail::neon_table<double>();
      break;
#else
      throw ConfigError("neon backend not available on this platform");
#endif
  }
  g_backend = b;
  g_initialized = true;
}

void ensure_init() {
  if (!g_initialized) install(detect());
}

}  // namespace

Backend active_backend() {
  ensure_init();
  return g_backend;
}

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::scalar: return "scalar";
    case Backend::avx2: return "avx2";
    case Backend::neon: return "neon";
  }
  return "?";
}

bool backend_available(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

void set_backend(Backend b) {
  if (!backend_available(b))
    throw ConfigError(std::string("kernel backend '") + backend_name(b) +
                      "' not available on this machine");
  install(b);
}

template <>
const Table<float>& table<float>() {
  ensure_init();
  return g_table_f;
}

template <>
const Table<double>& table<double>() {
  ensure_init();
  return g_table_d;
}

}  // namespace ndcr::kernels
