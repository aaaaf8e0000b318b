#pragma once

// Seeded randomness with hand-rolled distributions. std::*_distribution is
// implementation-defined, so uniform/normal/shuffle are spelled out here to
// keep runs reproducible across standard libraries. Engine state serializes
// to text for checkpoint resume.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpmoe/numerics.hpp"

namespace cpmoe {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent sub-streams (data generation, model init, training) derived
// from one master seed.
enum class SeedDomain : uint64_t { kStream = 1, kModel = 2, kTrain = 3 };

inline uint64_t derive_seed(uint64_t master, SeedDomain domain) {
  return splitmix64(master ^ splitmix64(static_cast<uint64_t>(domain)));
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return (engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without the cached spare, so one draw consumes a fixed
  // number of engine words.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Unbiased integer in [0, n) via Lemire's multiply-shift rejection.
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw DimensionError("rng: bounded(0)");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto lo = static_cast<uint64_t>(m);
    if (lo < n) {
      const uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream oss;
    oss << engine_;
    return oss.str();
  }

  void deserialize(const std::string& text) {
    std::istringstream iss(text);
    iss >> engine_;
    if (iss.fail()) throw IoError("rng: malformed serialized state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cpmoe
