#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mtlnet {

// Hex SHA-1 of "blob <size>\0" + bytes, i.e. the object id git assigns.
std::string git_blob_sha1(std::string_view bytes);
std::string file_git_sha1(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);

}  // namespace mtlnet
