#include "cadrag/step_parser.hpp"

#include <cctype>
#include <limits>
#include <optional>

#include "cadrag/text_util.hpp"

namespace cadrag::step {

namespace {

constexpr std::string_view kMagic = "ISO-10303-21";
constexpr std::string_view kEnd = "END-ISO-10303-21";

std::string kind_name(StepError::Kind k) {
  switch (k) {
    case StepError::Kind::lexical: return "lexical error";
    case StepError::Kind::structural: return "structural error";
    case StepError::Kind::truncation: return "truncated file";
  }
  return "error";
}

bool is_keyword_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}
bool is_keyword_char(char c, bool allow_dash = false) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
         (allow_dash && c == '-');
}

class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text) {}

  StepModel parse() {
    StepModel model;
    skip_ws();
    expect_word(kMagic, "expected ISO-10303-21 at start of file");
    expect_char(';');

    bool saw_header = false;
    for (;;) {
      skip_ws();
      if (at_end()) truncated();
      auto word_pos = pos_;
      auto word = read_word(true);
      if (word.empty())
        fail(StepError::Kind::structural, word_pos, "expected section keyword");
      if (word == kEnd) {
        expect_char(';');
        return model;
      }
      if (word == "HEADER") {
        if (saw_header)
          fail(StepError::Kind::structural, word_pos, "duplicate HEADER section");
        saw_header = true;
        expect_char(';');
        read_header(model);
      } else if (word == "DATA") {
        skip_ws();
        if (peek() == '(') (void)read_parenthesised();  // edition 3 parameters
        expect_char(';');
        read_data(model);
      } else if (word == "ANCHOR" || word == "REFERENCE" || word == "SIGNATURE") {
        expect_char(';');
        skip_section();
      } else {
        fail(StepError::Kind::structural, word_pos,
             "unexpected keyword '" + word + "' between sections");
      }
    }
  }

 private:
  [[noreturn]] void fail(StepError::Kind kind, std::size_t offset,
                         const std::string& msg) {
    throw StepError(kind, offset, msg);
  }
  [[noreturn]] void truncated() {
    fail(StepError::Kind::truncation, text_.size(),
         "input ended before END-ISO-10303-21;");
  }

  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return at_end() ? '\0' : text_[pos_]; }

  void skip_ws() {
    while (!at_end()) {
      char c = text_[pos_];
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' ||
          c == '\v') {
        ++pos_;
      } else if (c == '/' && pos_ + 1 < text_.size() && text_[pos_ + 1] == '*') {
        skip_comment();
      } else {
        break;
      }
    }
  }

  void skip_comment() {
    auto start = pos_;
    auto close = text_.find("*/", pos_ + 2);
    if (close == std::string_view::npos)
      fail(StepError::Kind::lexical, start, "unterminated comment");
    pos_ = close + 2;
  }

  std::string read_word(bool allow_dash = false) {
    std::string out;
    if (at_end() || !is_keyword_start(text_[pos_])) return out;
    while (!at_end() && is_keyword_char(text_[pos_], allow_dash)) {
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(text_[pos_])));
      ++pos_;
    }
    return out;
  }

  void expect_word(std::string_view word, const std::string& msg) {
    auto at = pos_;
    if (at_end()) truncated();
    if (read_word(true) != word) fail(StepError::Kind::structural, at, msg);
  }

  void expect_char(char c) {
    skip_ws();
    if (at_end()) truncated();
    if (text_[pos_] != c)
      fail(StepError::Kind::structural, pos_,
           std::string("expected '") + c + "'");
    ++pos_;
  }

  // Reads a '...' string starting at pos_ (which must hold the quote).
  std::string read_string() {
    auto start = pos_;
    ++pos_;
    std::string out;
    for (;;) {
      if (at_end())
        fail(StepError::Kind::lexical, start, "unterminated string");
      char c = text_[pos_++];
      if (c == '\'') {
        if (!at_end() && text_[pos_] == '\'') {
          out += '\'';
          ++pos_;
          continue;
        }
        return out;
      }
      out += c;
    }
  }

  void skip_binary() {
    auto start = pos_;
    auto close = text_.find('"', pos_ + 1);
    if (close == std::string_view::npos)
      fail(StepError::Kind::lexical, start, "unterminated binary literal");
    pos_ = close + 1;
  }

  struct Group {
    std::string inner;
    std::vector<std::string> strings;
  };

  // Reads a balanced (...) group starting at pos_. Returns the inner text
  // with comments removed; collects decoded string literals.
  Group read_parenthesised() {
    Group g;
    auto start = pos_;
    ++pos_;
    int depth = 1;
    for (;;) {
      if (at_end()) truncated();
      char c = text_[pos_];
      if (c == '\'') {
        auto s0 = pos_;
        g.strings.push_back(read_string());
        g.inner.append(text_.substr(s0, pos_ - s0));
        continue;
      }
      if (c == '"') {
        auto s0 = pos_;
        skip_binary();
        g.inner.append(text_.substr(s0, pos_ - s0));
        continue;
      }
      if (c == '/' && pos_ + 1 < text_.size() && text_[pos_ + 1] == '*') {
        skip_comment();
        g.inner += ' ';
        continue;
      }
      if (c == ';')
        fail(StepError::Kind::structural, pos_,
             "';' inside unbalanced parentheses opened at offset " +
                 std::to_string(start));
      ++pos_;
      if (c == '(') {
        ++depth;
      } else if (c == ')') {
        if (--depth == 0) return g;
      }
      g.inner += c;
    }
  }

  void read_header(StepModel& model) {
    for (;;) {
      skip_ws();
      if (at_end()) truncated();
      auto at = pos_;
      auto name = read_word();
      if (name.empty())
        fail(StepError::Kind::structural, at, "expected header entity name");
      if (name == "ENDSEC") {
        expect_char(';');
        return;
      }
      skip_ws();
      if (peek() != '(') {
        if (at_end()) truncated();
        fail(StepError::Kind::structural, pos_, "expected '(' after " + name);
      }
      auto group = read_parenthesised();
      expect_char(';');
      model.header.push_back({std::move(name), std::move(group.inner)});
    }
  }

  std::int64_t read_instance_id() {
    auto at = pos_;
    ++pos_;  // '#'
    std::int64_t value = 0;
    bool any = false;
    while (!at_end() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      int d = text_[pos_] - '0';
      if (value > (std::numeric_limits<std::int64_t>::max() - d) / 10)
        fail(StepError::Kind::lexical, at, "instance id out of range");
      value = value * 10 + d;
      any = true;
      ++pos_;
    }
    if (!any) fail(StepError::Kind::lexical, at, "malformed instance id");
    return value;
  }

  void read_data(StepModel& model) {
    for (;;) {
      skip_ws();
      if (at_end()) truncated();
      auto at = pos_;
      if (peek() != '#') {
        auto word = read_word();
        if (word == "ENDSEC") {
          expect_char(';');
          return;
        }
        fail(StepError::Kind::structural, at, "expected '#id=' or ENDSEC");
      }
      EntityRecord rec;
      rec.id = read_instance_id();
      expect_char('=');
      skip_ws();
      if (at_end()) truncated();
      if (peek() == '(') {
        rec.complex = true;
        auto group = read_parenthesised();
        rec.args = std::move(group.inner);
        rec.parsed_strings = std::move(group.strings);
        rec.keyword = first_keyword(rec.args);
        if (rec.keyword.empty())
          fail(StepError::Kind::structural, at, "complex instance without keyword");
      } else {
        if (peek() == '!') {
          rec.user_defined = true;
          ++pos_;
        }
        auto kw_at = pos_;
        rec.keyword = read_word();
        if (rec.keyword.empty())
          fail(StepError::Kind::structural, kw_at, "expected entity keyword");
        skip_ws();
        if (peek() != '(') {
          if (at_end()) truncated();
          fail(StepError::Kind::structural, pos_,
               "expected '(' after " + rec.keyword);
        }
        auto group = read_parenthesised();
        rec.args = std::move(group.inner);
        rec.parsed_strings = std::move(group.strings);
      }
      expect_char(';');
      auto id = rec.id;
      if (!model.entities.emplace(id, std::move(rec)).second)
        fail(StepError::Kind::structural, at,
             "duplicate instance id #" + std::to_string(id));
    }
  }

  static std::string first_keyword(std::string_view inner) {
    std::size_t i = 0;
    while (i < inner.size() && !is_keyword_start(inner[i])) {
      if (inner[i] != ' ' && inner[i] != '\t' && inner[i] != '\n' &&
          inner[i] != '\r' && inner[i] != '!')
        return {};
      ++i;
    }
    std::string out;
    while (i < inner.size() && is_keyword_char(inner[i]))
      out += static_cast<char>(std::toupper(static_cast<unsigned char>(inner[i++])));
    return out;
  }

  void skip_section() {
    for (;;) {
      skip_ws();
      if (at_end()) truncated();
      if (is_keyword_start(peek())) {
        if (read_word() == "ENDSEC") {
          expect_char(';');
          return;
        }
        continue;
      }
      char c = peek();
      if (c == '\'') {
        (void)read_string();
      } else if (c == '"') {
        skip_binary();
      } else {
        ++pos_;
      }
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

StepError::StepError(Kind kind, std::size_t offset, const std::string& message)
    : ParseError(kind_name(kind) + " at byte " + std::to_string(offset) + ": " +
                 message),
      kind_(kind),
      offset_(offset) {}

StepModel parse_p21(std::string_view text) { return Reader(text).parse(); }

StepModel parse_p21_file(const std::filesystem::path& path) {
  return parse_p21(read_file(path));
}

std::vector<std::string> list_parts(const StepModel& model) {
  std::vector<std::string> names;
  for (const auto& [id, entity] : model.entities) {
    if (entity.keyword != "PRODUCT" || entity.complex) continue;
    names.push_back(entity.parsed_strings.empty() ? std::string()
                                                  : entity.parsed_strings.front());
  }
  return names;
}

std::size_t part_count(const StepModel& model) { return list_parts(model).size(); }

}  // namespace cadrag::step
