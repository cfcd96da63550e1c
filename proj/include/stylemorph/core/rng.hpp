#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stylemorph {

// Seeded random stream with pinned output sequences.
//
// The engine is std::mt19937_64 (stable across platforms by the standard),
// but the distribution transforms are implemented here because the std
// distribution objects are free to produce different sequences per
// implementation. Everything downstream (batch sampling, latent draws,
// weight init, evaluation protocols) must be bit-reproducible from a seed.
class SeededRng {
 public:
  SeededRng() : SeededRng(0) {}
  explicit SeededRng(uint64_t seed) : engine_(seed) {}

  // Derives an independent named stream from a root seed. Used so that
  // toggling one consumer (e.g. flips) never shifts another (e.g. latents).
  // Derivation: splitmix64(root ^ fnv1a64(name)).
  static SeededRng stream(uint64_t root_seed, std::string_view name) {
    return SeededRng(splitmix64(root_seed ^ fnv1a64(name)));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. The second variate is discarded so the
  // stream state is exactly the engine state (no hidden cache to persist).
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;          // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t bound = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= bound);
    return static_cast<int>(x % un);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static SeededRng deserialize(const std::string& text) {
    SeededRng r;
    std::istringstream is(text);
    is >> r.engine_;
    if (is.fail()) throw std::runtime_error("SeededRng: corrupt serialized state");
    return r;
  }

  static uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  static uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace stylemorph
