#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ulfb {

enum class ErrorCode {
  InvalidSchedule,
  ShapeError,
  StepPastEnd,
  InvalidLevel,
  UndefinedScore,
  EmptyBatch,
  ContaminatedTeacherData,
  FrozenModelError,
  ScheduleMismatch,
  LevelMismatch,
  InvalidConfig,
  TooSmall,
  NeedNegatives,
  TooManyPatches,
  SplitLeakage,
  InvalidModel,
  NeedSamples,
  NumericalError,
  IncompleteCohort,
  IncompatibleCheckpoint,
  CorruptCheckpoint,
  NaNDetected,
  IoError,
  MissingCohort,
  UnknownSuite,
};

constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidSchedule: return "InvalidSchedule";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::StepPastEnd: return "StepPastEnd";
    case ErrorCode::InvalidLevel: return "InvalidLevel";
    case ErrorCode::UndefinedScore: return "UndefinedScore";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ContaminatedTeacherData: return "ContaminatedTeacherData";
    case ErrorCode::FrozenModelError: return "FrozenModelError";
    case ErrorCode::ScheduleMismatch: return "ScheduleMismatch";
    case ErrorCode::LevelMismatch: return "LevelMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::NeedNegatives: return "NeedNegatives";
    case ErrorCode::TooManyPatches: return "TooManyPatches";
    case ErrorCode::SplitLeakage: return "SplitLeakage";
    case ErrorCode::InvalidModel: return "InvalidModel";
    case ErrorCode::NeedSamples: return "NeedSamples";
    case ErrorCode::NumericalError: return "NumericalError";
    case ErrorCode::IncompleteCohort: return "IncompleteCohort";
    case ErrorCode::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::NaNDetected: return "NaNDetected";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingCohort: return "MissingCohort";
    case ErrorCode::UnknownSuite: return "UnknownSuite";
  }
  return "Unknown";
}

/// Library-wide exception. `code()` is stable and maps onto the C API
/// status values (see ulfbridge.h).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace ulfb
