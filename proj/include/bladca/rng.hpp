#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bladca {

/// splitmix64 finalizer; used to derive independent sub-seeds from
/// (seed, stage, index) tuples so that every random draw in a pipeline is a
/// pure function of the manifest seed.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ mix64(stream));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index) {
  std::uint64_t h = 1469598103934665603ull; // FNV offset basis
  for (char c : stage) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return mix64(seed ^ mix64(h) ^ mix64(index * 0x9e3779b97f4a7c15ull + 1));
}

/// Deterministic uniform stream. std::mt19937_64 output is pinned by the
/// standard; the [0,1) mapping below avoids std::uniform_real_distribution,
/// whose algorithm is implementation-defined.
class UniformStream {
public:
  explicit UniformStream(std::uint64_t seed) : gen_(seed) {}

  double next_unit() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform on [0, 2*pi).
  double next_phase() { return next_unit() * 6.283185307179586476925286766559; }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // modulo bias is < 2^-40 for the n used here (small groups); acceptable
    return gen_() % n;
  }

private:
  std::mt19937_64 gen_;
};

} // namespace bladca
