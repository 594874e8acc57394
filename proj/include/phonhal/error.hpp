#pragma once

#include <stdexcept>
#include <string>

namespace phonhal {

enum class ErrorCode {
  invalid_argument,
  io,
  bad_magic,
  unsupported_version,
  truncated,
  non_finite,
  config,
  corrupt,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Diagnostics sink. Defaults to stderr; tests swap it to capture warnings.
using WarningSink = void (*)(const std::string& message);
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace phonhal
