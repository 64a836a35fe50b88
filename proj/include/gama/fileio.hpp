#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gama {

// Throw FormatError when the file cannot be opened.
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace gama
