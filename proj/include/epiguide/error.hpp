#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace epiguide {

enum class ErrorCode {
  DegenerateBaseline,
  ZeroLine,
  EpipolePixel,
  InvalidArgument,
  IndexOutOfRange,
  ShapeMismatch,
  MissingGeometry,
  NonFiniteActivation,
  CacheMismatch,
  InsufficientPoints,
  DegenerateConfiguration,
  ZeroDenominator,
  NoModelFound,
  InvalidCounts,
  UnknownQuery,
  MissingFeatures,
  EmptyQuerySet,
  NoPositives,
  BadMagic,
  TruncatedPayload,
  UnsupportedDtype,
  SchemaViolation,
  DuplicateId,
  DanglingPath,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above. `line`
// is the 1-based manifest line for loader errors and -1 elsewhere.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, long line = -1);

  ErrorCode code() const noexcept { return code_; }
  long line() const noexcept { return line_; }

 private:
  ErrorCode code_;
  long line_;
};

}  // namespace epiguide
