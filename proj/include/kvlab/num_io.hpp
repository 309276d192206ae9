// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <system_error>

#include "kvlab/errors.hpp"

namespace kvlab {

/// Shortest decimal form that round-trips the exact double.
inline std::string fmt_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text) {
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw config_error("malformed number '" + std::string(text) + "'");
    }
    return v;
}

inline std::uint64_t parse_u64(std::string_view text) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw config_error("malformed integer '" + std::string(text) + "'");
    }
    return v;
}

}  // namespace kvlab
