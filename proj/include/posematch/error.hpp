#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace posematch {

enum class ErrorCode {
  kDegenerateInput,
  kBehindCamera,
  kInvalidCount,
  kEmptyBank,
  kEmptyPatches,
  kUnscoredRecord,
  kShapeMismatch,
  kInvalidTemperature,
  kAllBackground,
  kInsufficientCorrespondence,
  kRetryExhausted,
  kEmptyHypotheses,
  kIndexOutOfRange,
  kCorruptFile,
  kTooFewPoints,
  kInvalidArgument,
  kIoError,
};

inline std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateInput: return "DegenerateInput";
    case ErrorCode::kBehindCamera: return "BehindCamera";
    case ErrorCode::kInvalidCount: return "InvalidCount";
    case ErrorCode::kEmptyBank: return "EmptyBank";
    case ErrorCode::kEmptyPatches: return "EmptyPatches";
    case ErrorCode::kUnscoredRecord: return "UnscoredRecord";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kInvalidTemperature: return "InvalidTemperature";
    case ErrorCode::kAllBackground: return "AllBackground";
    case ErrorCode::kInsufficientCorrespondence: return "InsufficientCorrespondence";
    case ErrorCode::kRetryExhausted: return "RetryExhausted";
    case ErrorCode::kEmptyHypotheses: return "EmptyHypotheses";
    case ErrorCode::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kTooFewPoints: return "TooFewPoints";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace posematch
