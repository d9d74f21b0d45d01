#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cmseg {

// Bad data handed to an operation (wrong dims, out-of-vocab ids, NaN inputs).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent model/run configuration (channel mismatches, bad enum values).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (stage index out of range, finalizing an empty accumulator).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

#define CMSEG_CHECK_INPUT(cond, msg) \
  do { if (!(cond)) throw ::cmseg::InputError(msg); } while (0)
#define CMSEG_CHECK_CONFIG(cond, msg) \
  do { if (!(cond)) throw ::cmseg::ConfigError(msg); } while (0)
#define CMSEG_CHECK_USAGE(cond, msg) \
  do { if (!(cond)) throw ::cmseg::UsageError(msg); } while (0)

// splitmix64, used to derive independent seed streams from one run seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// FNV-1a over a string; stable across platforms, used for config hashes.
inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace cmseg
