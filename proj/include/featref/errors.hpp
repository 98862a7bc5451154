#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace featref {

enum class ErrorCode {
  InvalidArgument,
  CheiralityViolation,
  DegenerateGeometry,
  TrackInvariant,
  KeypointOutOfBounds,
  OutOfPatch,
  SelfMatch,
  EmptyInput,
  NumericalFailure,
  SingularPointBlock,
  MissingPatch,
  TrackTooSmall,
  EmptyTrack,
  GaugeUnderconstrained,
  TooFewInliers,
  ParseError,
  UnknownCameraModel,
  DanglingReference,
  BadMagic,
  TruncatedPayload,
  VersionUnsupported,
  NonPositiveConfidence,
  ConfigInvalid,
  IdMismatch,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::CheiralityViolation: return "CheiralityViolation";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::TrackInvariant: return "TrackInvariant";
    case ErrorCode::KeypointOutOfBounds: return "KeypointOutOfBounds";
    case ErrorCode::OutOfPatch: return "OutOfPatch";
    case ErrorCode::SelfMatch: return "SelfMatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::SingularPointBlock: return "SingularPointBlock";
    case ErrorCode::MissingPatch: return "MissingPatch";
    case ErrorCode::TrackTooSmall: return "TrackTooSmall";
    case ErrorCode::EmptyTrack: return "EmptyTrack";
    case ErrorCode::GaugeUnderconstrained: return "GaugeUnderconstrained";
    case ErrorCode::TooFewInliers: return "TooFewInliers";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnknownCameraModel: return "UnknownCameraModel";
    case ErrorCode::DanglingReference: return "DanglingReference";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::NonPositiveConfidence: return "NonPositiveConfidence";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::IdMismatch: return "IdMismatch";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// Numerical failures are reported separately from bad input by the CLI.
constexpr bool is_numerical(ErrorCode code) {
  return code == ErrorCode::NumericalFailure || code == ErrorCode::SingularPointBlock;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace featref
