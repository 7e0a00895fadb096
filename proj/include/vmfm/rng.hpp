#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "vmfm/hash.hpp"

namespace vmfm {

// splitmix64 round; the standard finalizer makes derived seeds well mixed even
// when inputs differ in a single bit.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stateless seed derivation: every stochastic choice in the pipeline draws its
// seed from (base seed, purpose tag, indices...). Runs therefore replay
// identically regardless of evaluation order or restarts.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = splitmix64(base ^ fnv1a64(tag));
  for (std::uint64_t ix : indices) h = splitmix64(h ^ splitmix64(ix + 0x12d34full));
  return h;
}

inline std::mt19937_64 make_engine(std::uint64_t seed) { return std::mt19937_64(seed); }

// Uniform draws are hand rolled because std distributions are only specified
// up to implementation; bit reproducibility across toolchains requires a fixed
// mapping from engine output to floats.
inline double uniform01(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(eng);
}

// Uniform integer in [0, n) via rejection-free multiply-shift; n must be > 0.
inline std::uint64_t uniform_index(std::mt19937_64& eng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(eng) * static_cast<double>(n)) % n;
}

inline bool bernoulli(std::mt19937_64& eng, double p) { return uniform01(eng) < p; }

// Fisher-Yates with the fixed uniform_index mapping.
template <class Vec>
void shuffle_indices(Vec& v, std::mt19937_64& eng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_index(eng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace vmfm
