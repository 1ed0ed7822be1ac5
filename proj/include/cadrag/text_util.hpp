#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cadrag {

std::string_view trim_view(std::string_view s);
std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);
bool starts_with_icase(std::string_view s, std::string_view prefix);

std::vector<std::string> split(std::string_view s, char sep);
std::vector<std::string> split_lines(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Filename order that compares embedded digit runs numerically, so
/// part2.png sorts before part10.png.
bool natural_less(std::string_view a, std::string_view b);

std::size_t edit_distance(std::string_view a, std::string_view b);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);
/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view content);

std::vector<nlohmann::ordered_json> read_jsonl(
    const std::filesystem::path& path);
std::string to_jsonl(const std::vector<nlohmann::ordered_json>& rows);

}  // namespace cadrag
