#include "calsuffix/hash.hpp"

#include <fmt/format.h>

namespace calsuffix {

std::string hex_digest(std::uint64_t h) { return fmt::format("{:016x}", h); }

}  // namespace calsuffix
