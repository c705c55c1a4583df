// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>

namespace gag {

// FNV-1a, 64-bit. Integrity fingerprint for checkpoints, banks and data
// files; not a cryptographic hash.
class Fnv1a64 {
 public:
  void update(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      state_ ^= static_cast<uint64_t>(p[i]);
      state_ *= 0x100000001b3ULL;
    }
  }

  void update(std::span<const char> bytes) { update(bytes.data(), bytes.size()); }

  uint64_t digest() const { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return std::string(buf);
  }

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a64_hex(const void* data, size_t len) {
  Fnv1a64 h;
  h.update(data, len);
  return h.hex();
}

inline std::string fnv1a64_hex(const std::string& s) { return fnv1a64_hex(s.data(), s.size()); }

// splitmix64; used to derive independent sub-seeds from a run seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t tag_from_string(const std::string& s) {
  Fnv1a64 h;
  h.update(s.data(), s.size());
  return h.digest();
}

}  // namespace gag
