#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qada {

/// Deterministic random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. All distributions are implemented here rather than taken from
/// <random>, because the library distributions are not portable across
/// standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in (0, 1).
  double uniform_open();
  /// Uniform integer in [0, n); n > 0.
  std::size_t uniform_index(std::size_t n);
  /// Standard normal (Box-Muller, one value per call).
  double normal();
  /// Gamma(shape, 1) via Marsaglia-Tsang, with the u^(1/a) boost for shape < 1.
  double gamma(double shape);
  /// Natural log of a Gamma(shape, 1) variate. Stays finite for tiny shapes
  /// where the variate itself would underflow.
  double log_gamma_variate(double shape);
  /// Index drawn proportionally to non-negative weights (need not sum to 1).
  std::size_t categorical(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  /// Independent child stream keyed by counter; does not advance this stream.
  Rng split(std::uint64_t counter) const;

  /// Textual engine state; restores the exact position in the stream.
  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Draws Dirichlet(alphas) by normalising independent Gamma(alpha_j, 1) draws.
/// Throws std::invalid_argument for empty input or a non-positive/NaN alpha.
std::vector<double> dirichlet_sample(std::span<const double> alphas, Rng& rng);

}  // namespace qada
