#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace flatland {

/// Finalizer from the splitmix64 generator. Bijective on 64-bit values with
/// strong avalanche, which is what makes the counter construction below safe.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

/// Counter-based random stream. A stream is identified by a seed plus up to
/// four key components (layer index, step, sample index, purpose tag...).
/// Draws are a pure function of (key, draw counter), so any consumer can be
/// given its own stream and the overall schedule of draws stays reproducible
/// no matter which order consumers run in.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t k1 = 0, std::uint64_t k2 = 0,
                     std::uint64_t k3 = 0, std::uint64_t k4 = 0) {
    key_ = mix64(seed + 0x9e3779b97f4a7c15ull);
    key_ = mix64(key_ ^ (k1 + 0xd1b54a32d192ed03ull));
    key_ = mix64(key_ ^ (k2 + 0x8cb92ba72f3d8dd7ull));
    key_ = mix64(key_ ^ (k3 + 0xaef17502108ef2d9ull));
    key_ = mix64(key_ ^ (k4 + 0x9216d5d98979fb1bull));
  }

  /// Child stream with an extended key. The child's draws are independent of
  /// the parent's counter position.
  RngStream child(std::uint64_t k1, std::uint64_t k2 = 0) const {
    RngStream s = *this;
    s.key_ = mix64(key_ ^ (k1 + 0xd1b54a32d192ed03ull));
    s.key_ = mix64(s.key_ ^ (k2 + 0x8cb92ba72f3d8dd7ull));
    s.counter_ = 0;
    s.has_cached_normal_ = false;
    return s;
  }

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  /// Uniform draw in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform draw in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller. Pairs are cached.
  double normal() {
    if (has_cached_normal_) {
      has_cached_normal_ = false;
      return cached_normal_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
  }

  /// Gamma draw, Marsaglia-Tsang squeeze with the shape boost for a < 1.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double u = 1.0 - uniform();  // (0, 1]
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x;
      double v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace flatland
