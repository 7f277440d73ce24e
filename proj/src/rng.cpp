#include "qada/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace qada {

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() {
  for (;;) {
    const double u = uniform();
    if (u > 0.0) return u;
  }
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Reject the tail that would bias the modulo.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x < limit) return static_cast<std::size_t>(x % bound);
  }
}

double Rng::normal() {
  const double u1 = uniform_open();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

// Marsaglia & Tsang (2000), valid for shape >= 1. Returns log of the variate.
double log_gamma_mt(Rng& rng, double shape) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return std::log(d * v);
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return std::log(d * v);
  }
}

}  // namespace

double Rng::log_gamma_variate(double shape) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape >= 1.0) return log_gamma_mt(*this, shape);
  // Gamma(a) = Gamma(a + 1) * U^(1/a)
  const double boosted = log_gamma_mt(*this, shape + 1.0);
  return boosted + std::log(uniform_open()) / shape;
}

double Rng::gamma(double shape) { return std::exp(log_gamma_variate(shape)); }

std::size_t Rng::categorical(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("categorical: empty weights");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("categorical: negative or NaN weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("categorical: weights sum to zero");
  const double r = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0.0) last_positive = i;
    acc += weights[i];
    if (r < acc) return i;
  }
  return last_positive;
}

Rng Rng::split(std::uint64_t counter) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32),
                    0x51ad0u};
  Rng child(seed_ ^ (counter * 0x9E3779B97F4A7C15ull));
  child.engine_.seed(seq);
  return child;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  std::uint64_t seed = 0;
  std::mt19937_64 engine;
  is >> seed >> engine;
  if (!is) throw std::invalid_argument("Rng::set_state: malformed state");
  seed_ = seed;
  engine_ = engine;
}

std::vector<double> dirichlet_sample(std::span<const double> alphas, Rng& rng) {
  if (alphas.empty()) throw std::invalid_argument("dirichlet_sample: no concentrations");
  for (double a : alphas) {
    if (!(a > 0.0) || !std::isfinite(a)) {
      throw std::invalid_argument("dirichlet_sample: concentrations must be positive and finite");
    }
  }
  if (alphas.size() == 1) return {1.0};

  std::vector<double> logs(alphas.size());
  for (std::size_t j = 0; j < alphas.size(); ++j) logs[j] = rng.log_gamma_variate(alphas[j]);
  const double top = *std::max_element(logs.begin(), logs.end());
  std::vector<double> eta(alphas.size());
  double total = 0.0;
  for (std::size_t j = 0; j < eta.size(); ++j) {
    eta[j] = std::exp(logs[j] - top);
    total += eta[j];
  }
  for (double& e : eta) e /= total;
  return eta;
}

}  // namespace qada
