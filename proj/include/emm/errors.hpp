// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace emm {

/// Error categories surfaced by the library. The CLI maps these to
/// process exit codes, so the set is part of the public contract.
enum class ErrorCode {
  config = 2,
  data = 3,
  no_common_structure = 4,
  dimension = 5,
  checksum = 6,
  format = 7,
  version = 8,
  truncated = 9,
  usage = 10,
  not_applicable = 11,
  numeric = 12,
  tail_mismatch = 13,
  undefined_metric = 14,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return "config";
    case ErrorCode::data: return "data";
    case ErrorCode::no_common_structure: return "no_common_structure";
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::format: return "format";
    case ErrorCode::version: return "version";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::usage: return "usage";
    case ErrorCode::not_applicable: return "not_applicable";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::tail_mismatch: return "tail_mismatch";
    case ErrorCode::undefined_metric: return "undefined_metric";
  }
  return "unknown";
}

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace emm
