#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace metassm {

/// Deterministic random stream. Every consumer derives its own stream from a
/// master seed through `derive`, a pure function of (seed, tag, indices), so
/// trials, initializers and per-step noise are reproducible independently of
/// evaluation order or thread scheduling.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  static std::uint64_t derive(std::uint64_t base, std::string_view tag,
                              std::uint64_t a = 0, std::uint64_t b = 0);

  RngStream child(std::string_view tag, std::uint64_t a = 0,
                  std::uint64_t b = 0) const {
    return RngStream(derive(seed_, tag, a, b));
  }

  std::uint64_t seed() const { return seed_; }

  double normal() { return normal_(gen_); }
  double uniform() { return unit_(gen_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(gen_); }
  /// Uniform integer in [0, n).
  std::uint64_t integer(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_);
  }

  void fill_normal(std::span<double> out) {
    for (auto& x : out) x = normal_(gen_);
  }
  void fill_normal(std::span<float> out) {
    for (auto& x : out) x = static_cast<float>(normal_(gen_));
  }
  void fill_uniform(std::span<double> out, double lo, double hi) {
    for (auto& x : out) x = uniform(lo, hi);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

}  // namespace metassm
