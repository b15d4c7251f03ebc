#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ndcr {

// Error taxonomy shared across the project. CLI maps these to exit codes:
// config/usage -> 1, format -> 2, numeric -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64: tiny, fully specified PRNG. Every stochastic component in the
// project draws from this so datasets and runs are bit-reproducible across
// platforms and standard library versions.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  bool next_bool(double p) { return next_uniform() < p; }

  // Box-Muller, one value per call (the second draw is discarded to keep the
  // stream position independent of call parity).
  double next_gaussian() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    while (u1 <= 1e-300) u1 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// Derive an independent stream for item `index` from a master seed.
inline uint64_t derive_seed(uint64_t master, uint64_t index) {
  Rng r(master ^ (0xd1b54a32d192ed03ull * (index + 1)));
  return r.next_u64();
}

// FNV-1a, used to fingerprint effective configurations in every artifact.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace ndcr
