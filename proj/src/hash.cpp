#include "incstab/hash.hpp"

#include <array>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

#include "incstab/errors.hpp"
#include "incstab/net_io.hpp"

namespace incstab {

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ConfigError("cannot open " + path.string());
  }
  const std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return sha256_hex(content);
}

std::string hash_vector(const Vector& v) {
  std::string text;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    text += format_double(v[i]);
    text += '\n';
  }
  return sha256_hex(text);
}

}  // namespace incstab
