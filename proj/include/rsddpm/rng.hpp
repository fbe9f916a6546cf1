#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

#include "rsddpm/tensor.hpp"

namespace rsddpm {

/// Platform-independent random stream.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Uniform reals take the top 53 bits and normals use a local
/// Box-Muller transform, since std::normal_distribution differs between
/// standard libraries.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/box-muller";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  static std::string algorithm() { return kAlgorithm; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi], rejection sampled so it is unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    return radius * std::cos(angle);
  }

  /// Independent child stream derived from (seed, stream). Used to give every
  /// generated dataset item its own generator.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(splitmix64(seed ^ splitmix64(stream + 0x9e3779b97f4a7c15ULL)));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// I.i.d. standard normal tensor. Values are drawn in 64-bit and then cast, so
/// both precisions consume the stream identically.
template <class Real>
Tensor<Real> gaussian(Rng& rng, const Shape& shape) {
  Tensor<Real> out(shape);  // rejects empty or zero-size shapes
  for (auto& v : out.data()) v = static_cast<Real>(rng.normal());
  return out;
}

}  // namespace rsddpm
