// Little-endian float payloads and line-oriented headers shared by the
// volume, field and checkpoint formats.
#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "recureg/error.hpp"

namespace recureg::io_detail {

inline void write_f32_le(std::ostream &os, std::span<const float> values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        buf[i * 4 + 0] = static_cast<char>(bits & 0xffu);
        buf[i * 4 + 1] = static_cast<char>((bits >> 8) & 0xffu);
        buf[i * 4 + 2] = static_cast<char>((bits >> 16) & 0xffu);
        buf[i * 4 + 3] = static_cast<char>((bits >> 24) & 0xffu);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32_le(std::istream &is, std::span<float> out) {
    std::vector<unsigned char> buf(out.size() * 4);
    is.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
        throw FormatError(FormatError::Kind::Truncated, "payload truncated: expected " + std::to_string(buf.size()) +
                                                            " bytes, got " + std::to_string(is.gcount()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(buf[i * 4]) | (static_cast<std::uint32_t>(buf[i * 4 + 1]) << 8) |
                                   (static_cast<std::uint32_t>(buf[i * 4 + 2]) << 16) |
                                   (static_cast<std::uint32_t>(buf[i * 4 + 3]) << 24);
        out[i] = std::bit_cast<float>(bits);
    }
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string &s, FormatError::Kind kind = FormatError::Kind::BadHeader) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError(kind, "malformed number '" + s + "'");
    return v;
}

// Parses a non-negative integer; values above `limit` raise DimOverflow.
inline long long parse_count(const std::string &s, long long limit) {
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec == std::errc::result_out_of_range) throw FormatError(FormatError::Kind::DimOverflow, "dimension overflow '" + s + "'");
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v < 0) {
        throw FormatError(FormatError::Kind::BadHeader, "malformed count '" + s + "'");
    }
    if (v > limit) throw FormatError(FormatError::Kind::DimOverflow, "dimension " + s + " exceeds limit");
    return v;
}

// Reads one '\n'-terminated header line of bounded length.
inline std::string read_header_line(std::istream &is, FormatError::Kind on_eof = FormatError::Kind::BadHeader) {
    std::string line;
    char c;
    while (is.get(c)) {
        if (c == '\n') return line;
        line.push_back(c);
        if (line.size() > 4096) throw FormatError(FormatError::Kind::BadHeader, "header line too long");
    }
    throw FormatError(on_eof, "unexpected end of header");
}

inline std::vector<std::string> split_ws(const std::string &line) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

} // namespace recureg::io_detail
