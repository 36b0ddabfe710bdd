#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace liealign {

enum class ErrorCode {
  invalid_input,
  degenerate_grid,
  format,
  validation,
  rank_deficient,
  shape_mismatch,
  non_finite,
  config,
  undefined_score,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::degenerate_grid: return "degenerate_grid";
    case ErrorCode::format: return "format";
    case ErrorCode::validation: return "validation";
    case ErrorCode::rank_deficient: return "rank_deficient";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::config: return "config";
    case ErrorCode::undefined_score: return "undefined_score";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace liealign
