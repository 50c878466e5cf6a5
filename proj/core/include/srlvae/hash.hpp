#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace srlvae {

// 64-bit FNV-1a. Stable across processes and platforms, used for split
// assignment, parameter fingerprints and config hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size);
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(std::span<const double> values) { update(values.data(), values.size_bytes()); }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view s);
std::string hash_hex(std::span<const double> values);

// splitmix64 finalizer; derives independent seeds from (seed, stream) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace srlvae
