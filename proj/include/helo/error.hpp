#pragma once

#include <stdexcept>
#include <string>

namespace helo {

/// Category of a failure. The CLI maps these onto exit codes.
enum class ErrorKind {
  dimension,
  configuration,
  numerical,
  validation,
  determinism,
  split,
  parse,
  empty_set,
  incomplete_table,
  divergence,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::configuration, what) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};
struct DeterminismError : Error {
  explicit DeterminismError(const std::string& what) : Error(ErrorKind::determinism, what) {}
};
struct SplitError : Error {
  explicit SplitError(const std::string& what) : Error(ErrorKind::split, what) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(ErrorKind::parse, what) {}
};
struct EmptySetError : Error {
  explicit EmptySetError(const std::string& what) : Error(ErrorKind::empty_set, what) {}
};
struct IncompleteTableError : Error {
  explicit IncompleteTableError(const std::string& what) : Error(ErrorKind::incomplete_table, what) {}
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& what) : Error(ErrorKind::divergence, what) {}
};

}  // namespace helo
