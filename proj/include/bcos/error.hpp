#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bcos {

enum class ErrorCode {
  ShapeMismatch,
  EmptyReduction,
  AxisOutOfRange,
  NonFiniteInput,
  NonFiniteActivation,
  NonFiniteGradient,
  WrongChannelCount,
  UnsupportedLayer,
  TooLarge,
  DivergedLoss,
  LowConfidenceCell,
  InsufficientConfidentSamples,
  BBoxOutOfBounds,
  AllZeroWeights,
  TooManyClasses,
  IndexOutOfRange,
  BadMagic,
  VersionUnsupported,
  CorruptHeader,
  TruncatedBlob,
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bcos
