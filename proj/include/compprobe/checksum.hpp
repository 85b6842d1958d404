#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace compprobe {

std::uint32_t crc32(std::string_view bytes, std::uint32_t running = 0);
std::string hex32(std::uint32_t value);
// CRC-32 of a whole file, as 8 lowercase hex digits.
std::string file_crc32(const std::filesystem::path& path);

}  // namespace compprobe
