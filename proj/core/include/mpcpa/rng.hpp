#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mpcpa {

using Rng = std::mt19937_64;

// Stream tags mixed into derived seeds so every actor/phase owns an
// independent RNG stream.
enum class Stream : std::uint64_t {
  kDenoiserTrain = 1,
  kGeneration = 2,
  kClassifier = 3,
  kFedAvg = 4,
  kPartition = 5,
  kSplit = 6,
  kMixture = 7,
  kAudit = 8,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// hash(global_seed, stream, ids...). Adding a client never perturbs the
// streams of existing clients because ids are hashed, not counted.
inline std::uint64_t derive_seed(std::uint64_t global_seed, Stream stream,
                                 std::initializer_list<std::uint64_t> ids = {}) {
  std::uint64_t h = splitmix64(global_seed ^ 0x6a09e667f3bcc908ULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  for (std::uint64_t id : ids) h = splitmix64(h ^ (id + 0x243f6a8885a308d3ULL));
  return h;
}

}  // namespace mpcpa
