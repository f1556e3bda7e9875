#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cbv::harness {

/// Lowercase hex SHA-256 digest of the byte range.
std::string sha256_hex(const void* data, std::size_t size);

std::string sha256_hex(const std::string& text);
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

/// Digest of a file's contents. Throws MissingFile.
std::string sha256_file_hex(const std::string& path);

}  // namespace cbv::harness
