#ifndef CTRLSIM_PROBABILITY_HPP
#define CTRLSIM_PROBABILITY_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctrlsim/error.hpp"

namespace ctrlsim {

/// A finite distribution stored densely, indexed by symbol.
using Distribution = std::vector<double>;

inline constexpr double kRowTolerance = 1e-12;

inline double total(std::span<const double> p) { return std::accumulate(p.begin(), p.end(), 0.0); }

/// Returns a description of the problem, or nullopt when `p` is a distribution.
inline std::optional<std::string> distribution_problem(std::span<const double> p,
                                                       double tolerance = kRowTolerance) {
  if (p.empty()) return "empty distribution";
  for (double v : p) {
    if (!std::isfinite(v)) return "non-finite entry";
    if (v < 0.0) return "negative entry " + std::to_string(v);
  }
  const double s = total(p);
  if (std::abs(s - 1.0) > tolerance) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "sums to %.17g", s);
    return std::string(buf);
  }
  return std::nullopt;
}

inline Distribution normalized(Distribution p) {
  const double s = total(p);
  if (!(s > 0.0)) fail(ErrorKind::zero_denominator, "cannot normalize a zero-mass vector");
  for (double& v : p) v /= s;
  return p;
}

inline Distribution uniform_distribution(std::size_t n) { return Distribution(n, 1.0 / static_cast<double>(n)); }

inline Distribution point_mass(std::size_t n, std::size_t at) {
  Distribution p(n, 0.0);
  p.at(at) = 1.0;
  return p;
}

/// ½ Σ |p − q|
inline double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) fail(ErrorKind::invalid_argument, "total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

/// SplitMix64 step; used to derive per-replicate and per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t root, std::uint64_t index) {
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded generator with platform-independent derived draws (the standard
/// distributions are implementation-defined, the engine is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1].
  double uniform_positive() { return 1.0 - uniform(); }

  std::size_t categorical(std::span<const double> p) {
    const double r = uniform() * total(p);
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] <= 0.0) continue;
      acc += p[i];
      last = i;
      if (r < acc) return i;
    }
    return last;
  }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Random strictly positive distribution: normalized exponentials plus a floor.
inline Distribution random_distribution(Rng& rng, std::size_t n, double floor = 0.05) {
  Distribution p(n);
  for (double& v : p) v = floor - std::log(rng.uniform_positive());
  return normalized(std::move(p));
}

}  // namespace ctrlsim

#endif  // CTRLSIM_PROBABILITY_HPP
