#pragma once
// Seeded random streams. Every consumer derives its own generator from the
// run seed plus a stream name (and optionally an index) so components can be
// perturbed independently.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace dynenc {

using Rng = std::mt19937_64;

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline Rng make_stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  const std::uint64_t tag = fnv1a(name);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) {
  // 53 random bits mapped to [lo, hi); avoids distribution differences
  // between standard library implementations.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(n)));
}

inline double normal(Rng& rng) {
  // Box-Muller with the same portable uniform source.
  double u1 = uniform(rng, 0.0, 1.0), u2 = uniform(rng, 0.0, 1.0);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace dynenc
