#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace bitbudget {

// Deterministic splitmix64 stream. Used everywhere instead of <random> so that
// results are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1); zero draws are rejected and redrawn.
  double next_uniform_open() {
    double u = next_uniform();
    while (u == 0.0) u = next_uniform();
    return u;
  }

  // Standard normal via Box-Muller (pair cached).
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform_open();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Gumbel(0,1): -log(-log u), u in (0,1).
  double next_gumbel() { return -std::log(-std::log(next_uniform_open())); }

  // Logistic(0,1): log(u) - log(1-u); equals the difference of two Gumbels.
  double next_logistic() {
    double u = next_uniform_open();
    while (u == 1.0) u = next_uniform_open();
    return std::log(u) - std::log1p(-u);
  }

  // Rademacher +/-1.
  double next_sign() { return (next_u64() & 1ULL) ? 1.0 : -1.0; }

  int next_below(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a 64-bit, the project-wide content hash.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Derives an independent stream seed from a base seed and a role tag.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t h = fnv1a64(tag);
  h = fnv1a64(&base, sizeof(base), h);
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  std::uint64_t h = derive_seed(base, tag);
  return fnv1a64(&index, sizeof(index), h);
}

}  // namespace bitbudget
