#include "calsuffix/error.hpp"

#include <fmt/format.h>

namespace calsuffix {

UnknownToken::UnknownToken(const std::string& text, std::size_t offset)
    : Error(fmt::format("cannot tokenize \"{}\" at byte {}", text, offset)), offset_(offset) {}

SchemaError::SchemaError(std::size_t line, const std::string& what)
    : Error(fmt::format("line {}: {}", line, what)), line_(line) {}

LengthExceeded::LengthExceeded(std::size_t length, std::size_t limit)
    : Error(fmt::format("sequence length {} exceeds context limit {}", length, limit)) {}

FitFailed::FitFailed(double accuracy, double floor)
    : Error(fmt::format("toy backend reached accuracy {:.3f}, below floor {:.3f}", accuracy, floor)),
      accuracy_(accuracy) {}

}  // namespace calsuffix
