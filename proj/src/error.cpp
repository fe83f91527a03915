#include "epiguide/error.hpp"

namespace epiguide {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateBaseline: return "DegenerateBaseline";
    case ErrorCode::ZeroLine: return "ZeroLine";
    case ErrorCode::EpipolePixel: return "EpipolePixel";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingGeometry: return "MissingGeometry";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::CacheMismatch: return "CacheMismatch";
    case ErrorCode::InsufficientPoints: return "InsufficientPoints";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::NoModelFound: return "NoModelFound";
    case ErrorCode::InvalidCounts: return "InvalidCounts";
    case ErrorCode::UnknownQuery: return "UnknownQuery";
    case ErrorCode::MissingFeatures: return "MissingFeatures";
    case ErrorCode::EmptyQuerySet: return "EmptyQuerySet";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::DanglingPath: return "DanglingPath";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message, long line)
    : std::runtime_error(std::string(to_string(code)) + ": " + message +
                         (line >= 0 ? " (line " + std::to_string(line) + ")" : "")),
      code_(code),
      line_(line) {}

}  // namespace epiguide
