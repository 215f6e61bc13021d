#pragma once

#include <charconv>
#include <string>

namespace finitekin {

// Shortest decimal that parses back to the same double.
inline std::string fmt_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

}  // namespace finitekin
