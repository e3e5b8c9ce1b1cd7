#ifndef MVTN_SRC_BYTES_HPP
#define MVTN_SRC_BYTES_HPP

// Internal little-endian binary IO used by the feature and checkpoint formats.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "mvtn/errors.hpp"

namespace mvtn::detail {

constexpr std::uint32_t kMaxStringLen = 4096;

template <typename T>
inline T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        T out;
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
    return v;
}

class ByteWriter {
  public:
    explicit ByteWriter(const std::filesystem::path& path)
        : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw IoError("cannot open for writing: " + path.string());
    }
    void u32(std::uint32_t v) {
        v = to_little(v);
        raw(&v, 4);
    }
    void f32(float v) {
        v = to_little(v);
        raw(&v, 4);
    }
    void f64(double v) {
        v = to_little(v);
        raw(&v, 8);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw IoError("write failed: " + path_.string());
    }

  private:
    std::ofstream out_;
    std::filesystem::path path_;
};

class ByteReader {
  public:
    explicit ByteReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path.string());
    }
    std::size_t offset() const { return offset_; }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return to_little(v);
    }
    float f32() {
        float v;
        raw(&v, 4);
        return to_little(v);
    }
    double f64() {
        double v;
        raw(&v, 8);
        return to_little(v);
    }
    std::string str() {
        std::size_t at = offset_;
        std::uint32_t len = u32();
        if (len > kMaxStringLen) throw FormatError("unreasonable string length", at);
        std::string s(len, '\0');
        raw(s.data(), len);
        return s;
    }
    void raw(void* p, std::size_t n) {
        in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("truncated file", offset_);
        offset_ += n;
    }

  private:
    std::ifstream in_;
    std::size_t offset_ = 0;
};

}  // namespace mvtn::detail

#endif  // MVTN_SRC_BYTES_HPP
