#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "labrl/common.hpp"

namespace labrl::binio {

// Little-endian primitives shared by all binary artifacts.

inline void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline void write_i32(std::ostream& os, int32_t v) { write_u32(os, static_cast<uint32_t>(v)); }

inline void write_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint8_t read_u8(std::istream& is) {
    int c = is.get();
    if (c == EOF) throw io_error("unexpected end of binary stream");
    return static_cast<uint8_t>(c);
}

inline uint32_t read_u32(std::istream& is) {
    char b[4];
    if (!is.read(b, 4)) throw io_error("unexpected end of binary stream");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

inline uint64_t read_u64(std::istream& is) {
    char b[8];
    if (!is.read(b, 8)) throw io_error("unexpected end of binary stream");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

inline int32_t read_i32(std::istream& is) { return static_cast<int32_t>(read_u32(is)); }

inline double read_f64(std::istream& is) {
    uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string read_str(std::istream& is) {
    uint64_t n = read_u64(is);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n)))
        throw io_error("unexpected end of binary stream");
    return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
    char b[4];
    if (!is.read(b, 4) || std::memcmp(b, magic, 4) != 0)
        throw io_error(std::string("not a ") + what + " file (bad magic)");
}

}  // namespace labrl::binio
