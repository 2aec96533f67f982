#include "inkdiff/error.hpp"

namespace inkdiff {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownCharacter: return "UnknownCharacter";
        case ErrorCode::EmptySource: return "EmptySource";
        case ErrorCode::UnexpectedToken: return "UnexpectedToken";
        case ErrorCode::UnbalancedBrace: return "UnbalancedBrace";
        case ErrorCode::DepthExceeded: return "DepthExceeded";
        case ErrorCode::EmptyGroup: return "EmptyGroup";
        case ErrorCode::GroupTooLong: return "GroupTooLong";
        case ErrorCode::WidthExceeded: return "WidthExceeded";
        case ErrorCode::CanvasOverflow: return "CanvasOverflow";
        case ErrorCode::NotEnoughSymbols: return "NotEnoughSymbols";
        case ErrorCode::GenerationStalled: return "GenerationStalled";
        case ErrorCode::InvalidRange: return "InvalidRange";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NumericalDivergence: return "NumericalDivergence";
        case ErrorCode::MissingTrace: return "MissingTrace";
        case ErrorCode::FormatError: return "FormatError";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::PathCollision: return "PathCollision";
    }
    return "Unknown";
}

}  // namespace inkdiff
