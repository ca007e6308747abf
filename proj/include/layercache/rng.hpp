#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace layercache {

// deterministic rng used everywhere weights or shuffles are drawn.
// mt19937 supplies raw bits; the float / shuffle / gaussian derivations are
// spelled out here so results are bit-stable across standard libraries.
class rng {
 public:
  explicit rng(std::uint32_t seed) : gen_(seed) {}

  std::uint32_t next_u32() { return gen_(); }

  // uniform in [0, 1) from the top 24 bits
  float next_float() {
    return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

  // unbiased bounded draw by rejection
  std::size_t index(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint32_t bound = static_cast<std::uint32_t>(n);
    const std::uint32_t limit = UINT32_MAX - UINT32_MAX % bound;
    std::uint32_t v = next_u32();
    while (v >= limit) v = next_u32();
    return v % bound;
  }

  // box-muller; caches the spare draw
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = next_float();
    float u2 = next_float();
    while (u1 <= 1e-12f) u1 = next_float();
    const float r = std::sqrt(-2.0f * std::log(u1));
    const float a = 6.2831853071795864769f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // fisher-yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

 private:
  std::mt19937 gen_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

}  // namespace layercache
