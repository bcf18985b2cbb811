#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace axinv {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (usage/validation=2, I/O+format=3, numerical=4).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Combine a base seed with a stream index (per-sample seeds, per-epoch
// shuffles) without correlated low bits.
inline uint64_t seed_for(uint64_t seed, uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x51ed270b7a649c4dull));
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// streams do not depend on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // One Box-Muller draw; the sine mate is discarded to keep state minimal.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal clipped by redraw to [-2s, 2s]; the usual transformer init.
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal() * stddev;
      if (std::abs(v) <= 2.0 * stddev) return v;
    }
  }

  // Index in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection sampling to stay unbiased.
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string serialize_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw ValueError("invalid RNG state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace axinv
