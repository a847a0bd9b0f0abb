#pragma once

#include <stdexcept>
#include <string>

namespace metaforge {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kFormat = 2,
  kDataSize = 3,
  kCheckpoint = 4,
  kValidation = 5,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// A caller broke an operation's preconditions (bad shapes, bad arguments).
class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& what) : Error(what) {}
};

/// A tensor handle was used with a tape that did not record it.
class MissingProvenance : public Error {
 public:
  explicit MissingProvenance(const std::string& what) : Error(what) {}
};

/// The finite-difference oracle cannot be trusted (e.g. the function is not deterministic).
class OracleInvalid : public Error {
 public:
  explicit OracleInvalid(const std::string& what) : Error(what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what, ExitCode::kValidation) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what, ExitCode::kValidation) {}
};

/// Input file is structurally unusable (missing columns, unreadable).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, ExitCode::kFormat) {}
};

/// Not enough usable data (no valid records, undersized task, degenerate source).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kDataSize) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(what, ExitCode::kCheckpoint) {}
};

}  // namespace metaforge
