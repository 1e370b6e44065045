#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace sspt {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return res.ec == std::errc() ? std::string(buf, res.ptr) : std::string("nan");
}

}  // namespace sspt
