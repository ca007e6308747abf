#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace layercache {

// little-endian f32 blob files used for weights and datasets
std::vector<float> read_f32_blob(const std::filesystem::path& path);
void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

// streaming sha-256 (hex digest)
class sha256 {
 public:
  sha256();
  ~sha256();
  sha256(const sha256&) = delete;
  sha256& operator=(const sha256&) = delete;
  void update(const void* data, std::size_t len);
  void update_f32(const std::vector<float>& values);
  std::string hex_digest();  // finalizes; call once

 private:
  void* ctx_;
};

std::string sha256_hex(const void* data, std::size_t len);

}  // namespace layercache
