#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace copywriter {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string file_sha256(const std::filesystem::path& path);

// First 8 bytes of SHA-256, used to derive per-item seeds that do not
// depend on iteration order.
std::uint64_t stable_hash64(std::string_view data);

}  // namespace copywriter
