#pragma once

#include <cstdint>
#include <limits>

namespace fbo {

// Namespaces for independent random streams. Each stream key also carries
// (seed, round, client, step), so two purposes never share draws.
enum class Purpose : std::uint64_t {
  kGNoise = 1,
  kFNoise = 2,
  kHessNoise = 3,
  kSampling = 4,
  kTau = 5,
  kInstance = 6,
};

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t absorb(std::uint64_t key, std::uint64_t field) {
  return mix64(key + kGolden + mix64(field + 0x632BE59BD9B4E019ULL));
}

}  // namespace detail

/// Counter-based generator: draw j of a stream is mix64(key + (j+1)·golden),
/// i.e. a SplitMix64 sequence whose start is a hash of the full key. Streams
/// are pure functions of their key, so results never depend on which thread
/// or in which order clients are evaluated.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t key) : key_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Client index used for streams that belong to the server rather than a client.
inline constexpr std::uint64_t kServerStream = std::numeric_limits<std::uint64_t>::max();

inline RngStream rng_stream(std::uint64_t seed, std::uint64_t round, std::uint64_t client,
                            Purpose purpose, std::uint64_t step) {
  std::uint64_t key = detail::mix64(seed ^ 0xD1B54A32D192ED03ULL);
  key = detail::absorb(key, static_cast<std::uint64_t>(purpose));
  key = detail::absorb(key, round);
  key = detail::absorb(key, client);
  key = detail::absorb(key, step);
  return RngStream(key);
}

}  // namespace fbo
