#pragma once

#include <stdexcept>
#include <string>

namespace dprune {

enum class ErrorCode {
  kShape = 1,
  kIndex,
  kContract,
  kConfig,
  kLength,
  kData,
  kPlanStale,
  kSelection,
  kIntegrity,
  kVersion,
  kIo,
  kDependency,
  kUndefined,
  kLocked,
};

const char* error_code_name(ErrorCode code);

// Every failure raised by the library carries a machine-readable code so the
// C API and CLI can map it onto a status value without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace dprune
