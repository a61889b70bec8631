#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace gdnv {

/// mt19937_64 with value mappings written out here so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Unbiased integer in [0, n).
  std::uint64_t index(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Named sub-seed so components draw from independent streams of one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

}  // namespace gdnv
