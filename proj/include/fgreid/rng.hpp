#pragma once

#include <cstdint>
#include <random>

#include "fgreid/tensor.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// Seeded generator. Draws are built directly from the engine's 64-bit output
/// so sequences do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng);
Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng);

}  // namespace fgreid::inline FGREID_PRECISION
