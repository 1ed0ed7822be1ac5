#pragma once

// Reader for ISO 10303-21 (STEP Part 21) clear-text exchange files.
//
// Covers the exchange structure syntax only: the ISO-10303-21; envelope,
// HEADER and DATA sections, `#id=KEYWORD(args);` instances (simple and
// complex), '' string escapes and /* */ comments. No geometry semantics.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cadrag/error.hpp"

namespace cadrag::step {

struct HeaderRecord {
  std::string name;
  std::string args;
};

struct EntityRecord {
  std::int64_t id = 0;
  /// Upper-cased keyword. For complex instances, the first partial keyword.
  std::string keyword;
  /// Argument text between the outer parentheses, comments removed.
  std::string args;
  /// Decoded quoted strings in order of appearance, at any nesting depth.
  std::vector<std::string> parsed_strings;
  bool complex = false;
  bool user_defined = false;
};

struct StepModel {
  std::vector<HeaderRecord> header;
  std::map<std::int64_t, EntityRecord> entities;
};

class StepError : public ParseError {
 public:
  enum class Kind { lexical, structural, truncation };

  StepError(Kind kind, std::size_t offset, const std::string& message);

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

/// Throws StepError; never anything else for any input bytes.
StepModel parse_p21(std::string_view text);
StepModel parse_p21_file(const std::filesystem::path& path);

/// First string argument of every PRODUCT instance, ascending instance id.
std::vector<std::string> list_parts(const StepModel& model);
std::size_t part_count(const StepModel& model);

}  // namespace cadrag::step
