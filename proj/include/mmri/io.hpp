#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmri {

enum class IoErrorKind { BadMagic, BadVersion, Truncated, Malformed, FileAccess };

class IoError : public std::runtime_error {
public:
    IoError(IoErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    IoErrorKind kind() const { return kind_; }

private:
    IoErrorKind kind_;
};

namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError(IoErrorKind::FileAccess, "write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw IoError(IoErrorKind::Truncated, std::string("truncated file while reading ") + what);
}

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    write_bytes(os, b, 4);
}

inline uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    read_bytes(is, b, 4, what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(os, u);
}

inline float read_f32(std::istream& is, const char* what) {
    uint32_t u = read_u32(is, what);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

inline void write_f64(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    write_u32(os, static_cast<uint32_t>(u));
    write_u32(os, static_cast<uint32_t>(u >> 32));
}

inline double read_f64(std::istream& is, const char* what) {
    uint64_t lo = read_u32(is, what);
    uint64_t hi = read_u32(is, what);
    uint64_t u = lo | (hi << 32);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

inline void write_f32_array(std::ostream& os, const float* p, size_t n) {
    // x86/ARM little-endian fast path with a portable fallback
    static const uint16_t probe = 1;
    if (*reinterpret_cast<const unsigned char*>(&probe) == 1) {
        write_bytes(os, p, n * 4);
    } else {
        for (size_t i = 0; i < n; ++i) write_f32(os, p[i]);
    }
}

inline void read_f32_array(std::istream& is, float* p, size_t n, const char* what) {
    static const uint16_t probe = 1;
    if (*reinterpret_cast<const unsigned char*>(&probe) == 1) {
        read_bytes(is, p, n * 4, what);
    } else {
        for (size_t i = 0; i < n; ++i) p[i] = read_f32(is, what);
    }
}

inline void expect_magic(std::istream& is, const char magic[4], const char* format_name) {
    char got[4];
    read_bytes(is, got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0)
        throw IoError(IoErrorKind::BadMagic, std::string("bad magic for ") + format_name + " file");
}

} // namespace io
} // namespace mmri
