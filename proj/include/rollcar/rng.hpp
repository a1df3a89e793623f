#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace rollcar {

// Random stream with the handful of draws the samplers need.  Streams are
// derived from a base seed plus a path of integer keys (chain index,
// replicate index, purpose tag) so that every consumer owns an independent,
// reproducible sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : Rng(seed, {}) {}

  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (auto k : path) {
      words.push_back(static_cast<std::uint32_t>(k));
      words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  double normal() { return std_normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * std_normal_(engine_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  // Gamma with shape/rate, so that E = shape / rate.
  double gamma(double shape, double rate) {
    return std::gamma_distribution<double>(shape, 1.0 / rate)(engine_);
  }

  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(engine_);
    const double y = std::gamma_distribution<double>(b, 1.0)(engine_);
    return x / (x + y);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> std_normal_{0.0, 1.0};
};

// Purpose tags used when deriving sub-streams.
namespace stream {
inline constexpr std::uint64_t kChain = 1;
inline constexpr std::uint64_t kReplicate = 2;
inline constexpr std::uint64_t kAttendance = 3;
inline constexpr std::uint64_t kOutcomes = 4;
inline constexpr std::uint64_t kFit = 5;
}  // namespace stream

}  // namespace rollcar
