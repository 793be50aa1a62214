#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace pvseg {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  if (r.ec != std::errc()) return "nan";
  return std::string(buf, r.ptr);
}

}  // namespace pvseg
