#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ipt {

// Streaming SHA-256 (FIPS 180-4).
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update(const std::vector<double>& v) { update(v.data(), v.size() * sizeof(double)); }
  std::string hex_digest();  // finalizes

  static std::string hex(const std::string& s);

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t bit_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

std::string base64_encode(const void* data, size_t len);
std::vector<uint8_t> base64_decode(const std::string& text);

// Bit-exact little-endian float64 blob <-> base64 text.
std::string doubles_to_base64(const std::vector<double>& v);
std::vector<double> doubles_from_base64(const std::string& text);

}  // namespace ipt
