#pragma once

#include <stdexcept>
#include <string>

namespace flownav {

// Coarse error families. The CLI maps them onto exit codes.
enum class ErrorKind {
  shape,         // dimension, rank, graph-shape and sequence-length mismatches
  index,         // out-of-range ids
  degenerate,    // fully masked rows, empty aggregations
  config,        // invalid configuration or manifest
  data,          // parse, tokenization, template and insufficient-data failures
  numeric,       // NaN / inf during optimization
  precondition,  // API misuse such as probing without captured attention
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, w) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error(ErrorKind::index, w) {}
};
struct DegenerateError : Error {
  explicit DegenerateError(const std::string& w) : Error(ErrorKind::degenerate, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct TemplateError : DataError {
  explicit TemplateError(const std::string& w) : DataError("template error: " + w) {}
};
struct TokenizationError : DataError {
  explicit TokenizationError(const std::string& w) : DataError("tokenization error: " + w) {}
};
struct InsufficientDataError : DataError {
  explicit InsufficientDataError(const std::string& w) : DataError("insufficient data: " + w) {}
};
struct ParseError : DataError {
  ParseError(const std::string& source, std::size_t line, const std::string& w)
      : DataError(source + ":" + std::to_string(line) + ": " + w), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::numeric, w) {}
};
struct PreconditionError : Error {
  explicit PreconditionError(const std::string& w) : Error(ErrorKind::precondition, w) {}
};

}  // namespace flownav
