#pragma once

// Little-endian binary IO helpers, FNV-1a content hashing, and
// shortest-round-trip float formatting shared by the file formats.

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "iclforge/errors.hpp"

namespace iclforge {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put_le(v, 2); }
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void bytes(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void str(const std::string& s) {
        if (s.size() > 0xffff) throw IoError("string too long for u16 length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void f32_array(const float* p, std::size_t n) { bytes(p, n * 4); }

    const std::vector<char>& data() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + path);
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("write failed: " + path);
    }

private:
    void put_le(std::uint64_t v, int nbytes) {
        for (int i = 0; i < nbytes; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::vector<char> buf_;
};

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<char>& v) : data_(v.data()), size_(v.size()) {}

    std::uint64_t offset() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    bool done() const { return pos_ == size_; }

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
    std::uint64_t u64() { return get_le(8); }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::size_t n = u16();
        const char* p = take(n);
        return std::string(p, n);
    }
    void f32_array(float* out, std::size_t n) { std::memcpy(out, take(n * 4), n * 4); }
    const char* take(std::size_t n) {
        if (size_ - pos_ < n)
            throw FormatError("unexpected end of data (need " + std::to_string(n) + " bytes)", pos_);
        const char* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    void expect_magic(const char* magic4) {
        std::uint64_t at = pos_;
        const char* p = take(4);
        if (std::memcmp(p, magic4, 4) != 0)
            throw FormatError(std::string("bad magic, expected \"") + magic4 + "\"", at);
    }
    void expect_done() {
        if (!done()) throw FormatError("trailing bytes after end of structure", pos_);
    }

private:
    std::uint64_t get_le(int nbytes) {
        const char* p = take(static_cast<std::size_t>(nbytes));
        std::uint64_t v = 0;
        for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }
    const char* data_;
    std::size_t size_;
    std::uint64_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    in.seekg(0, std::ios::end);
    auto n = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<char> buf(static_cast<std::size_t>(n));
    if (n > 0) in.read(buf.data(), n);
    if (!in) throw IoError("read failed: " + path);
    return buf;
}

// FNV-1a, 64-bit. Stable content fingerprint for stores, suites and manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// Shortest decimal form that round-trips; keeps CSV output byte-deterministic.
inline std::string format_float(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string format_float(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace iclforge
