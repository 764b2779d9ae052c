#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "incstab/net.hpp"

namespace incstab {

inline constexpr int kWeightFormatVersion = 1;

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

/// Text weight container: version line, layer count, activation tags, then
/// per layer its dims, row-major weights and bias.
void write_net(std::ostream& os, const FeedforwardNet& net);
FeedforwardNet read_net(std::istream& is);

void save_net(const std::filesystem::path& path, const FeedforwardNet& net);
FeedforwardNet load_net(const std::filesystem::path& path);

void write_vector_line(std::ostream& os, const Vector& v);
Vector read_vector_line(std::istream& is, std::size_t expected);

}  // namespace incstab
