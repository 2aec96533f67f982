#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace inkdiff {

enum class ErrorCode {
    UnknownCharacter,
    EmptySource,
    UnexpectedToken,
    UnbalancedBrace,
    DepthExceeded,
    EmptyGroup,
    GroupTooLong,
    WidthExceeded,
    CanvasOverflow,
    NotEnoughSymbols,
    GenerationStalled,
    InvalidRange,
    ShapeMismatch,
    NumericalDivergence,
    MissingTrace,
    FormatError,
    ConfigError,
    PathCollision,
};

const char* to_string(ErrorCode code);

/// Library-wide exception. `position()` is a token/character index for
/// parse errors, an example index for numerical errors, and npos otherwise.
class Error : public std::runtime_error {
public:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    Error(ErrorCode code, const std::string& what, std::size_t position = npos)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), position_(position) {}

    ErrorCode code() const noexcept { return code_; }
    std::size_t position() const noexcept { return position_; }

private:
    ErrorCode code_;
    std::size_t position_;
};

}  // namespace inkdiff
