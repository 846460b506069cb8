#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "cap/tensor.hpp"

namespace cap {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
/// Hash of the raw little-endian double representation.
std::string sha256_hex(const Tensor& tensor);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace cap
