/* ctxmt - a desk-scale laboratory for context-aware neural machine translation.
 * Copyright (C) 2026 The ctxmt authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace ctxmt {

/// Counter-based pseudo-random stream. Draw i is a pure function of
/// (seed, i): the splitmix64 finalizer applied to seed + (i+1) * gamma.
/// Replaying from the same seed reproduces the sequence bit-for-bit on
/// every platform; no hidden state beyond the counter.
class RngStream {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64-counter";

  explicit RngStream(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

  uint64_t next_u64() {
    counter_ += 1;
    return mix(seed_ + counter_ * kGamma);
  }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi], both inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
    uint64_t span = uint64_t(hi) - uint64_t(lo) + 1;
    return lo + int(next_u64() % span);
  }

  /// One zero-mean draw with standard deviation sigma. Box-Muller over two
  /// counter steps; the second half of the pair is discarded so gaussian
  /// draws stay a pure function of the counter.
  double gaussian(double sigma) {
    if (sigma < 0.0) throw std::invalid_argument("gaussian: sigma < 0");
    if (sigma == 0.0) return 0.0;
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = double(next_u64() >> 11) * 0x1.0p-53;        // [0, 1)
    return sigma * std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Seeded Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = size_t(next_u64() % i);
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Independent stream for a named component, e.g. fork("dropout").
  /// Forking does not advance this stream's counter.
  RngStream fork(std::string_view tag) const {
    uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a over the tag
    for (char c : tag) {
      h ^= uint64_t(uint8_t(c));
      h *= 0x100000001B3ull;
    }
    return RngStream(mix(seed_ ^ h));
  }

  RngStream fork(std::string_view tag, uint64_t index) const {
    RngStream base = fork(tag);
    return RngStream(mix(base.seed_ + (index + 1) * kGamma));
  }

 private:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  uint64_t seed_;
  uint64_t counter_ = 0;
};

}  // namespace ctxmt
