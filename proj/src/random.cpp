#include "nfbench/random.hpp"

#include <cmath>

namespace nfbench {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ULL + b));
}

RandomStream::RandomStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t RandomStream::next_u64() { return engine_(); }

Real RandomStream::uniform01() {
  return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53;
}

Real RandomStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  // u1 in (0, 1] keeps the log finite.
  Real u1 = 1.0 - uniform01();
  Real u2 = uniform01();
  Real r = std::sqrt(-2.0 * std::log(u1));
  Real theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

Vec RandomStream::normal_vector(Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
  return v;
}

Mat RandomStream::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
  return m;
}

Real RandomStream::gamma_half() {
  Real z = normal();
  return 0.5 * z * z;
}

long RandomStream::geometric(Real p) {
  // Inversion: N = ceil(log(1-u) / log(1-p)).
  Real u = uniform01();
  long n = static_cast<long>(std::ceil(std::log1p(-u) / std::log1p(-p)));
  return n < 1 ? 1 : n;
}

RandomStream RandomStream::child(std::uint64_t salt) const {
  return RandomStream(mix_seed(seed_, salt));
}

}  // namespace nfbench
