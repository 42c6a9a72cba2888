#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mvsds {

// Thrown on precondition violations (maps to CLI exit code 1).
using invalid_argument = std::invalid_argument;

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}
}  // namespace detail

#define MVSDS_REQUIRE(cond, ...)                                            \
  do {                                                                      \
    if (!(cond))                                                            \
      throw ::mvsds::invalid_argument(                                      \
          ::mvsds::detail::format_msg("precondition failed: ", #cond, ": ", \
                                      __VA_ARGS__));                        \
  } while (0)

#define MVSDS_CHECK(cond, ...)                                             \
  do {                                                                     \
    if (!(cond))                                                           \
      throw std::runtime_error(::mvsds::detail::format_msg(                \
          "internal check failed: ", #cond, ": ", __VA_ARGS__));           \
  } while (0)

}  // namespace mvsds
