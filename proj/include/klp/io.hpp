#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace klp::io {

using json = nlohmann::json;

std::string read_file(const std::filesystem::path& path);

/// Calls `fn(record, line_number)` for every non-blank line. Lines that are not
/// valid JSON raise ParseError with the 1-based line number.
void for_each_jsonl(std::istream& in, const std::function<void(const json&, std::size_t)>& fn);
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const json&, std::size_t)>& fn);

/// One compact JSON document per line, '\n' terminated.
std::string to_jsonl(const std::vector<json>& records);

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Field accessors that raise ParseError naming the field.
const json& require_field(const json& obj, const char* name, std::size_t line = 0);
std::string require_string(const json& obj, const char* name, std::size_t line = 0);

}  // namespace klp::io
