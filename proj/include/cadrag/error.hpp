#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cadrag {

// Base of every error the library throws. Callers that only care about
// "something in cadrag failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class RenderError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Ground-truth resolution failure. `candidates` holds the closest known
/// descriptions (unresolved) or the colliding filenames (ambiguous).
class ResolutionError : public Error {
 public:
  enum class Kind { unresolved, ambiguous };

  ResolutionError(Kind kind, std::string description,
                  std::vector<std::string> candidates, const std::string& what)
      : Error(what),
        kind_(kind),
        description_(std::move(description)),
        candidates_(std::move(candidates)) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& description() const noexcept { return description_; }
  const std::vector<std::string>& candidates() const noexcept {
    return candidates_;
  }

 private:
  Kind kind_;
  std::string description_;
  std::vector<std::string> candidates_;
};

}  // namespace cadrag
