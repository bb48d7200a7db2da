#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "fpb/tensor.hpp"

namespace fpb {

// Counter-based splittable generator. A stream is (key, counter); draws mix
// the pair through splitmix64-style finalizers, so any (seed, path-of-ids)
// always yields the same sequence regardless of what other streams consumed.
// child(id) derives an independent stream; draws never affect siblings.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  Rng child(std::uint64_t id) const {
    Rng r(*this);
    r.key_ = mix(key_ ^ mix(id + 0x632be59bd9b4e019ull));
    r.counter_ = 0;
    r.spare_valid_ = false;
    return r;
  }

  // Convenience: derive a child from a label, e.g. child("passport").
  Rng child(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return child(h);
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (spare_valid_) {
      spare_valid_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    spare_valid_ = true;
    return r * std::cos(a);
  }

  std::size_t index(std::size_t n) {  // uniform int in [0, n)
    return static_cast<std::size_t>(next_u64() % n);
  }

  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * normal();
    return t;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool spare_valid_ = false;
};

}  // namespace fpb
