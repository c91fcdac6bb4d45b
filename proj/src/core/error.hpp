#pragma once

#include <stdexcept>
#include <string>

namespace ssch {

enum class ErrorCode {
  InvalidArgument,
  Io,
  Format,
  Numeric,
};

// Single exception type for the core; the C API maps `code()` onto status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorCode::InvalidArgument, what);
}
inline Error io_error(const std::string& what) { return Error(ErrorCode::Io, what); }
inline Error format_error(const std::string& what) {
  return Error(ErrorCode::Format, what);
}
inline Error numeric_error(const std::string& what) {
  return Error(ErrorCode::Numeric, what);
}

}  // namespace ssch
