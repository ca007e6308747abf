#include "layercache/blob.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "layercache/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "blob io assumes a little-endian host");

namespace layercache {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw missing_blob_error("cannot open " + path.string());
  f.seekg(0, std::ios::end);
  const auto len = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  if (len > 0 && !f.read(reinterpret_cast<char*>(bytes.data()), len)) {
    throw missing_blob_error("cannot read " + path.string());
  }
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw error("short write to " + path.string());
}

std::vector<float> read_f32_blob(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() % 4 != 0) {
    throw parse_error(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of 4");
  }
  std::vector<float> vals(bytes.size() / 4);
  std::memcpy(vals.data(), bytes.data(), bytes.size());
  return vals;
}

void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values) {
  std::vector<std::uint8_t> bytes(values.size() * 4);
  std::memcpy(bytes.data(), values.data(), bytes.size());
  write_file_bytes(path, bytes);
}

sha256::sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw error("sha256 init failed");
  }
}

sha256::~sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void sha256::update(const void* data, std::size_t len) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) != 1) {
    throw error("sha256 update failed");
  }
}

void sha256::update_f32(const std::vector<float>& values) {
  update(values.data(), values.size() * 4);
}

std::string sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len) != 1) {
    throw error("sha256 final failed");
  }
  static const char* hexd = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hexd[md[i] >> 4]);
    out.push_back(hexd[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const void* data, std::size_t len) {
  sha256 h;
  h.update(data, len);
  return h.hex_digest();
}

}  // namespace layercache
