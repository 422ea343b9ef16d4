#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <variant>

#include "anc/errors.hpp"
#include "anc/tensor.hpp"

namespace anc {

/// Counter-based generator: output n is a pure function of (seed, stream, n),
/// built on the SplitMix64 finalizer. Streams derived with split() are
/// independent of how many values the parent has drawn.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; no cached second value, so the stream
  /// position after each call is fixed.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Rng split(std::uint64_t stream) const {
    Rng r;
    r.key_ = mix(key_ ^ mix(stream * 0xd1b54a32d192ed03ULL + 1));
    return r;
  }

  std::uint64_t counter() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

struct Uniform {
  double lo = 0.0;
  double hi = 1.0;
};
struct Normal {
  double mean = 0.0;
  double stddev = 1.0;
};
using Distribution = std::variant<Uniform, Normal>;

inline DenseTensor rng_fill(Rng& rng, Shape shape, const Distribution& dist,
                            DType dtype = DType::f64) {
  DenseTensor t(shape, dtype);
  auto data = t.data();
  if (const auto* u = std::get_if<Uniform>(&dist)) {
    if (!(u->lo < u->hi)) throw InvalidArgument("uniform requires lo < hi");
    for (auto& v : data) {
      double x = rng.uniform(u->lo, u->hi);
      if (dtype == DType::f32) x = static_cast<float>(x);
      // rounding can land exactly on hi
      while (x >= u->hi) {
        x = rng.uniform(u->lo, u->hi);
        if (dtype == DType::f32) x = static_cast<float>(x);
      }
      v = x;
    }
  } else {
    const auto& n = std::get<Normal>(dist);
    if (!(n.stddev > 0.0)) throw InvalidArgument("normal requires std > 0");
    for (auto& v : data) {
      double x = n.mean + n.stddev * rng.normal();
      if (dtype == DType::f32) x = static_cast<float>(x);
      v = x;
    }
  }
  return t;
}

}  // namespace anc
