#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tinymoe {

enum class ErrorCode {
  InvalidImage,
  InvalidFeatures,
  SequenceTooLong,
  InvalidConfig,
  NumericError,
  InvalidK,
  AlreadySparse,
  EmptyBatch,
  InvalidLabel,
  ShapeError,
  EmptyResponse,
  InvalidBeta,
  InvalidSchedule,
  StageOrderError,
  TeacherUnavailable,
  TeacherTrainingFailed,
  InvalidMix,
  UnknownSymbol,
  EmptyEval,
  CheckpointError,
};

constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidImage: return "InvalidImage";
    case ErrorCode::InvalidFeatures: return "InvalidFeatures";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NumericError: return "NumericError";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::AlreadySparse: return "AlreadySparse";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::EmptyResponse: return "EmptyResponse";
    case ErrorCode::InvalidBeta: return "InvalidBeta";
    case ErrorCode::InvalidSchedule: return "InvalidSchedule";
    case ErrorCode::StageOrderError: return "StageOrderError";
    case ErrorCode::TeacherUnavailable: return "TeacherUnavailable";
    case ErrorCode::TeacherTrainingFailed: return "TeacherTrainingFailed";
    case ErrorCode::InvalidMix: return "InvalidMix";
    case ErrorCode::UnknownSymbol: return "UnknownSymbol";
    case ErrorCode::EmptyEval: return "EmptyEval";
    case ErrorCode::CheckpointError: return "CheckpointError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void check(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) {
    throw Error(code, what);
  }
}

}  // namespace tinymoe
