// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gag {

enum class ErrorCode {
  dimension_mismatch,
  degenerate_mask,
  numeric,
  frozen_discipline,
  range,
  length,
  input,
  config,
  template_error,
  insufficient_data,
  compatibility,
  conflict,
  corruption,
  kind,
  data,
  routing_integrity,
  spec,
  io,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::degenerate_mask: return "degenerate_mask";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::frozen_discipline: return "frozen_discipline";
    case ErrorCode::range: return "range";
    case ErrorCode::length: return "length";
    case ErrorCode::input: return "input";
    case ErrorCode::config: return "config";
    case ErrorCode::template_error: return "template_error";
    case ErrorCode::insufficient_data: return "insufficient_data";
    case ErrorCode::compatibility: return "compatibility";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::corruption: return "corruption";
    case ErrorCode::kind: return "kind";
    case ErrorCode::data: return "data";
    case ErrorCode::routing_integrity: return "routing_integrity";
    case ErrorCode::spec: return "spec";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

class GagError : public std::runtime_error {
 public:
  GagError(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }
  const char* code_name() const { return error_code_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw GagError(code, message);
}

}  // namespace gag
