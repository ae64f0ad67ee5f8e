#pragma once

#include <cmath>
#include <cstdint>

namespace binder {

// SplitMix64 finalizer. Stateless, so streams can be derived by hashing
// (seed, stream, counter) tuples instead of advancing shared state.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based RNG: every draw is a pure function of (seed, stream, counter),
// so identical seeds give bitwise-identical sequences regardless of what other
// streams were consumed in between.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64() {
    return mix64(seed_ ^ mix64(stream_ ^ mix64(counter_++)));
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Box-Muller. Two draws per sample, no cached second value, so the
  // counter advances deterministically.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  // Derived independent stream, e.g. one per epoch or per purpose tag.
  CounterRng fork(std::uint64_t substream) const {
    return CounterRng(seed_, mix64(stream_ ^ mix64(substream)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace binder
