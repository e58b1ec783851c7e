#pragma once

#include <array>
#include <cmath>

#include "smoltolk/common.hpp"

namespace smoltolk {

// xoshiro256++ with splitmix64 seeding. std::mt19937_64 would also be
// portable, but the std distributions are not; we need bit-identical
// streams across platforms, so both engine and distributions live here.
class Rng {
 public:
  explicit Rng(u64 seed = 0) { reseed(seed); }

  void reseed(u64 seed) {
    u64 x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ull;
      u64 z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      s = z ^ (z >> 31);
    }
  }

  u64 next() {
    auto rotl = [](u64 v, int k) { return (v << k) | (v >> (64 - k)); };
    const u64 result = rotl(state_[0] + state_[3], 23) + state_[0];
    const u64 t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform integer in [0, bound), bound > 0. Rejection-free Lemire-style
  // reduction would bias differently across word sizes; plain rejection
  // keeps the stream simple and exactly reproducible.
  u64 below(u64 bound) {
    u64 threshold = (0 - bound) % bound;
    for (;;) {
      u64 r = next();
      if (r >= threshold) return r % bound;
    }
  }

  i64 range(i64 lo, i64 hi) {  // inclusive bounds
    return lo + static_cast<i64>(below(static_cast<u64>(hi - lo + 1)));
  }

  double uniform() {  // [0, 1)
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double normal() {  // Box-Muller, no cached second value (keeps state minimal)
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (i64 i = static_cast<i64>(v.size()) - 1; i > 0; --i) {
      i64 j = static_cast<i64>(below(static_cast<u64>(i + 1)));
      std::swap(v[i], v[j]);
    }
  }

  std::array<u64, 4> state() const { return state_; }
  void set_state(const std::array<u64, 4>& s) { state_ = s; }

 private:
  std::array<u64, 4> state_{};
};

// Independent child stream derived from a parent seed and a label; used to
// partition generation work without coupling streams.
inline Rng child_rng(u64 seed, const std::string& label) {
  return Rng(fnv1a64(label, seed ^ 0x6a09e667f3bcc908ull));
}

}  // namespace smoltolk
