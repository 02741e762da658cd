#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace aswap {

// Streaming SHA-256 (FIPS 180-4). Self-contained so artifact files and
// manifests hash identically on every platform.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, std::size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }

  // Finalizes and returns the 32-byte digest. The object must be reset()
  // before reuse.
  std::array<std::uint8_t, 32> finish();

  static std::array<std::uint8_t, 32> digest(std::string_view data);
  static std::string hex_digest(std::string_view data);

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t state_[8];
  std::uint64_t bit_count_ = 0;
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
};

std::string to_hex(const std::array<std::uint8_t, 32>& digest);
std::array<std::uint8_t, 32> from_hex32(std::string_view hex);

}  // namespace aswap
