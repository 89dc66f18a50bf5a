#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace dualnet {

/// splitmix64 finalizer; used to derive child seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Root seed -> named child seeds. Adding a new consumer never reshuffles the
/// streams of existing ones because each child depends only on (parent, label).
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index = 0) {
  return mix64(parent ^ mix64(hash_label(label) + mix64(index)));
}

/// Thin wrapper over mt19937_64 with distribution helpers whose outputs are
/// fully specified (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() {
    ++draws_;
    return engine_();
  }
  std::uint64_t draws() const { return draws_; }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    // Lemire's multiply-shift; bias is below 2^-64 * n.
    return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  Rng child(std::string_view label, std::uint64_t i = 0) const { return Rng(derive_seed(seed_, label, i)); }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dualnet
