#pragma once

#include <stdexcept>
#include <string>

namespace lpdo {

// Base class for every error raised by the library. The CLI maps the
// concrete subclasses onto stable exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error { using Error::Error; };
class EmptyCorpusError : public Error { using Error::Error; };
class EmptySplitError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class CheckpointMismatchError : public Error { using Error::Error; };

}  // namespace lpdo
