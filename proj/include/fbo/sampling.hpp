#pragma once

// Client participation: which clients take part in a round and how many local
// steps each one runs.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "fbo/common.hpp"
#include "fbo/rng.hpp"

namespace fbo {

struct TauProfile {
  enum class Kind { kFixed, kUniform, kPerClient };

  Kind kind = Kind::kFixed;
  std::size_t tau = 1;                 // kFixed
  std::size_t lo = 1, hi = 1;          // kUniform, inclusive
  std::vector<std::size_t> per_client; // kPerClient, one entry per client

  static TauProfile fixed(std::size_t tau) { return {Kind::kFixed, tau, 1, 1, {}}; }
  static TauProfile uniform(std::size_t lo, std::size_t hi) { return {Kind::kUniform, 1, lo, hi, {}}; }
  static TauProfile listed(std::vector<std::size_t> taus) { return {Kind::kPerClient, 1, 1, 1, std::move(taus)}; }

  void validate(std::size_t n) const {
    switch (kind) {
      case Kind::kFixed:
        if (tau < 1) throw ValidationError("tau: must be >= 1");
        break;
      case Kind::kUniform:
        if (lo < 1) throw ValidationError("tau_lo: must be >= 1");
        if (hi < lo) throw ValidationError("tau_hi: must be >= tau_lo");
        break;
      case Kind::kPerClient:
        if (per_client.size() != n) throw ValidationError("tau_list: expected " + std::to_string(n) + " entries (one per client), got " + std::to_string(per_client.size()));
        for (auto t : per_client)
          if (t < 1) throw ValidationError("tau_list: every entry must be >= 1");
        break;
    }
  }

  bool operator==(const TauProfile&) const = default;
};

struct ParticipationPlan {
  std::size_t round = 0;
  std::vector<std::size_t> selected;  // ascending, distinct
  std::vector<std::size_t> tau;       // τ for every client, participating or not
};

/// Uniformly random P-subset of {0..n-1} without replacement, returned sorted.
inline std::vector<std::size_t> sample_clients(std::size_t n, std::size_t P, std::uint64_t round, std::uint64_t seed) {
  if (P == 0) throw ValidationError("P: must be >= 1");
  if (P > n) throw ValidationError("P: must be <= n (P=" + std::to_string(P) + ", n=" + std::to_string(n) + ")");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (P < n) {
    RngStream rng = rng_stream(seed, round, kServerStream, Purpose::kSampling, 0);
    // Partial Fisher–Yates: the first P slots are a uniform P-subset.
    for (std::size_t k = 0; k < P; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n - 1);
      std::swap(idx[k], idx[pick(rng)]);
    }
    idx.resize(P);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// τ for all n clients. Non-participants get a draw too, so the full-sum
/// normalizer stays defined and runs stay reproducible for every P.
inline std::vector<std::size_t> assign_taus(std::size_t n, std::uint64_t round, const TauProfile& profile,
                                            std::uint64_t seed) {
  profile.validate(n);
  std::vector<std::size_t> taus(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (profile.kind) {
      case TauProfile::Kind::kFixed:
        taus[i] = profile.tau;
        break;
      case TauProfile::Kind::kPerClient:
        taus[i] = profile.per_client[i];
        break;
      case TauProfile::Kind::kUniform: {
        RngStream rng = rng_stream(seed, round, i, Purpose::kTau, 0);
        std::uniform_int_distribution<std::size_t> dist(profile.lo, profile.hi);
        taus[i] = dist(rng);
        break;
      }
    }
  }
  return taus;
}

inline ParticipationPlan plan_round(std::size_t n, std::size_t P, std::uint64_t round, const TauProfile& profile,
                                    std::uint64_t seed) {
  return {static_cast<std::size_t>(round), sample_clients(n, P, round, seed), assign_taus(n, round, profile, seed)};
}

}  // namespace fbo
