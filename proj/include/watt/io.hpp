#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace watt {

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// Library version string, embedded in every output file.
std::string_view library_version();

// Keeps large tensor buffers on the heap instead of fresh mmap'd pages.
// Call once at program start.
void configure_allocator();

}  // namespace watt
