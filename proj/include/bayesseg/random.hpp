#pragma once
// Seeded random streams and the noise source consumed by stochastic layers.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string_view>

#include "bayesseg/tensor.hpp"

namespace bayesseg {

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream seed derived from a base seed and a textual tag (e.g. a sample id),
/// so per-item streams do not depend on processing order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(seed ^ mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return mix64(seed ^ mix64(index + 1)); }

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Source of standard-normal perturbations. A zero source yields exact zeros,
/// which collapses every stochastic layer onto its mean network.
class Noise {
 public:
  explicit Noise(Rng& rng) : rng_(rng) {}
  static Noise zero() { return Noise(); }

  bool is_zero() const { return !rng_.has_value(); }

  Tensor standard_normal(const Shape& shape) {
    std::vector<double> v(shape_size(shape), 0.0);
    if (rng_)
      for (auto& x : v) x = rng_->get().normal();
    return Tensor(shape, std::move(v), false);
  }

 private:
  Noise() = default;
  std::optional<std::reference_wrapper<Rng>> rng_;
};

}  // namespace bayesseg
