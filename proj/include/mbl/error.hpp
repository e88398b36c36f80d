#pragma once

#include <stdexcept>
#include <string>

namespace mbl {

/// Root of every error the library raises. Subclasses name the failure
/// category so callers (and the CLI exit-code mapping) can branch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class PreconditionError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class ConsistencyError : public Error { public: using Error::Error; };
class DegenerateError : public Error { public: using Error::Error; };
class VocabularyError : public Error { public: using Error::Error; };
class TaggingError : public Error { public: using Error::Error; };
class EmptyDataError : public Error { public: using Error::Error; };
class LabelError : public Error { public: using Error::Error; };
class IntegrityError : public Error { public: using Error::Error; };
class UnsupportedVersionError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };

/// Malformed text input. `line` is 1-based; 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid configuration or CLI arguments; detected before any work starts.
class ValidationError : public Error { public: using Error::Error; };

}  // namespace mbl
