#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cassle {

// Minimal SHA-256 (FIPS 180-4), used for checkpoint digests.
class Sha256 {
 public:
  Sha256();
  void update(const uint8_t* data, size_t len);
  void update(const std::vector<uint8_t>& data) { update(data.data(), data.size()); }
  std::string hex_digest();  // finalizes; call once

 private:
  void process_block(const uint8_t* block);

  uint32_t state_[8];
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::vector<uint8_t>& data);

}  // namespace cassle
