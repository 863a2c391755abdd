// Copyright 2026 The FedASK Simulator Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FEDASK_RNG_HPP_
#define FEDASK_RNG_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace fedask {

// Philox4x32-10 block function (Salmon et al., "Parallel random numbers: as
// easy as 1, 2, 3"). Pure: the same (counter, key) always gives the same
// block, so draws never depend on call order across streams.
inline std::array<std::uint32_t, 4> philox4x32_10(
    std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

namespace detail {
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace detail

// Named sub-stream tags. Every random draw in the simulator is taken from a
// stream derived as master.split(purpose).split(round).split(client), so
// adding clients or workers never shifts another party's draws.
enum class Purpose : std::uint64_t {
  kTask = 1,
  kDataset = 2,
  kInit = 3,
  kOmega = 4,
  kCohort = 5,
  kLocalTrain = 6,
  kDropout = 7,
  kNoiseStudy = 8,
  kTest = 9,
};

// Counter-based generator state. Each draw consumes one Philox block at
// `position` of the sub-stream `stream` under key `seed`.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t position = 0;

  RngState() = default;
  explicit RngState(std::uint64_t s, std::uint64_t st = 0,
                    std::uint64_t pos = 0)
      : seed(s), stream(st), position(pos) {}

  // Independent child stream; does not advance this state.
  RngState split(std::uint64_t tag) const {
    return RngState(seed, detail::mix64(stream ^ detail::mix64(tag + 1)), 0);
  }
  RngState split(Purpose p) const {
    return split(static_cast<std::uint64_t>(p) << 56);
  }

  std::array<std::uint32_t, 4> next_block() {
    const std::uint64_t pos = position++;
    return philox4x32_10(
        {static_cast<std::uint32_t>(pos), static_cast<std::uint32_t>(pos >> 32),
         static_cast<std::uint32_t>(stream),
         static_cast<std::uint32_t>(stream >> 32)},
        {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
  }

  std::uint64_t next_u64() {
    const auto b = next_block();
    return (std::uint64_t{b[1]} << 32) | b[0];
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe as a logarithm argument.
  double uniform_open0() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Uniform integer in [0, n) by rejection, n >= 1.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x < limit) return x % n;
    }
  }

  // Standard normal via Box-Muller on a single block (cosine branch).
  double normal() {
    const auto b = next_block();
    const std::uint64_t x = (std::uint64_t{b[1]} << 32) | b[0];
    const std::uint64_t y = (std::uint64_t{b[3]} << 32) | b[2];
    const double u1 = (static_cast<double>(x >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(y >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Gamma(shape, 1) by Marsaglia-Tsang; shape < 1 uses the U^(1/shape) boost.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform_open0(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = 0.0;
      double v = 0.0;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open0();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Symmetric Dirichlet(concentration) over `k` categories.
  std::vector<double> dirichlet(std::size_t k, double concentration) {
    std::vector<double> w(k);
    double total = 0.0;
    for (auto& x : w) {
      x = gamma(concentration);
      total += x;
    }
    if (!(total > 0.0)) {
      // Every gamma draw underflowed; the limit is a one-hot vector.
      std::fill(w.begin(), w.end(), 0.0);
      w[below(k)] = 1.0;
      return w;
    }
    for (auto& x : w) x /= total;
    return w;
  }
};

}  // namespace fedask

#endif  // FEDASK_RNG_HPP_
