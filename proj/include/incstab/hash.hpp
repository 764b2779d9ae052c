#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "incstab/net.hpp"

namespace incstab {

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);
/// Hash of the shortest round-trip text of each entry.
std::string hash_vector(const Vector& v);

}  // namespace incstab
