#pragma once

#include <cstdint>
#include <random>

#include "nfbench/types.hpp"

namespace nfbench {

/// Seeded random stream with fully specified output sequences.
///
/// Draws come from std::mt19937_64 (whose sequence the standard pins down)
/// and are turned into uniforms and normals here rather than through the
/// implementation-defined std::*_distribution adaptors, so identical seeds
/// give identical streams on every platform.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53-bit resolution.
  Real uniform01();

  /// Standard normal via Box-Muller (second draw cached).
  Real normal();

  Vec normal_vector(Eigen::Index n);
  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols);

  /// Gamma(0.5, 1) in the shape-rate convention, i.e. Z^2 / 2 for Z ~ N(0,1).
  Real gamma_half();

  /// Geometric N >= 1 with P(N = n) = p (1-p)^(n-1).
  long geometric(Real p);

  /// Independent stream derived from this stream's seed and a salt.
  RandomStream child(std::uint64_t salt) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_cached_normal_ = false;
  Real cached_normal_ = 0.0;
};

/// splitmix64 finalizer, used for seed derivation.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace nfbench
