#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace ibpbnn {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based generator: draw n of a stream keyed by `seed` is
/// splitmix64(key + n * golden), so a stream is fully described by
/// (seed, counter) and identical across platforms.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), key_(detail::splitmix64(seed)), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    return detail::splitmix64(key_ + 0x9e3779b97f4a7c15ULL * (counter_++));
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Box-Muller; consumes two draws per normal.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::below(0)");
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Independent stream derived from this one's seed and a label. Does not
  /// advance this stream.
  RngStream derive(std::uint64_t label) const {
    return RngStream(detail::splitmix64(key_ ^ detail::splitmix64(label + 0x632be59bd9b4e019ULL)));
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Log of a Gamma(shape, 1) draw by Marsaglia-Tsang rejection, with the
/// shape+1 boost for shape < 1. Working in log space keeps tiny shapes from
/// underflowing to exactly zero.
inline double log_gamma_sample(RngStream& rng, double shape) {
  if (!(shape > 0)) throw std::invalid_argument("gamma shape must be positive");
  double log_boost = 0.0;
  if (shape < 1.0) {
    log_boost = std::log(rng.uniform()) / shape;
    shape += 1.0;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x ||
        std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return std::log(d) + std::log(v) + log_boost;
    }
  }
}

/// Recorded standardized noise of one forward pass, in call order.
struct NoiseTape {
  std::vector<double> values;
  std::size_t cursor = 0;
};

/// Source of the randomness consumed by a forward pass.
///
/// Live samplers draw from an RngStream and optionally record the
/// standardized noise of each draw (a Gaussian epsilon, a uniform, or for
/// Beta draws the CDF value F(v)) into a tape. Replay samplers return the
/// recorded noise instead, so the same pass can be re-evaluated at perturbed
/// parameters with every random number frozen.
class Sampler {
 public:
  explicit Sampler(RngStream rng, std::shared_ptr<NoiseTape> record = nullptr)
      : rng_(rng), tape_(std::move(record)), replay_(false) {}

  static Sampler replay(std::shared_ptr<NoiseTape> tape) {
    Sampler s(RngStream(0), std::move(tape));
    s.replay_ = true;
    s.tape_->cursor = 0;
    return s;
  }

  bool replaying() const { return replay_; }
  RngStream& rng() { return rng_; }

  /// Copy that draws from a stream derived from `label`. Shares the tape, so
  /// recording and replay stay in call order. Two forks with the same label
  /// see the same random numbers.
  Sampler fork(std::uint64_t label) const {
    Sampler s = *this;
    s.rng_ = rng_.derive(label);
    return s;
  }

  double normal() {
    if (replay_) return next_recorded();
    const double e = rng_.normal();
    record(e);
    return e;
  }

  double uniform() {
    if (replay_) return next_recorded();
    const double u = rng_.uniform();
    record(u);
    return u;
  }

  /// Hook for Beta draws: `draw` produces a live sample, `standardize`
  /// maps it to its CDF value for the tape, and `invert` maps a recorded
  /// CDF value back to a sample at the current parameters.
  template <class Draw, class Standardize, class Invert>
  double beta_like(Draw&& draw, Standardize&& standardize, Invert&& invert) {
    if (replay_) return invert(next_recorded());
    const double v = draw(rng_);
    if (tape_) tape_->values.push_back(standardize(v));
    return v;
  }

 private:
  void record(double x) {
    if (tape_) tape_->values.push_back(x);
  }
  double next_recorded() {
    if (tape_->cursor >= tape_->values.size()) {
      throw std::logic_error("noise tape exhausted during replay");
    }
    return tape_->values[tape_->cursor++];
  }

  RngStream rng_;
  std::shared_ptr<NoiseTape> tape_;
  bool replay_;
};

}  // namespace ibpbnn
