#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "aswap/sha256.hpp"

namespace aswap {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Little-endian byte buffer builder for the artifact file formats. Buffers
// in memory; finish_with_digest() appends the SHA-256 of everything written
// so far, which is the trailing integrity hash shared by all formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(char(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void i32(std::int32_t v) { u32(std::uint32_t(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void i64(std::int64_t v) { u64(std::uint64_t(v)); }
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
  void bytes(const void* data, std::size_t len) {
    buf_.append(static_cast<const char*>(data), len);
  }
  void magic(const char tag[5]) { bytes(tag, 4); }
  // Length-prefixed UTF-8 string.
  void str(std::string_view s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }

  const std::string& data() const { return buf_; }

  std::string finish_with_digest() {
    const auto d = Sha256::digest(buf_);
    buf_.append(reinterpret_cast<const char*>(d.data()), d.size());
    return std::move(buf_);
  }

 private:
  std::string buf_;
};

// Cursor over a fully loaded file. verify_trailing_digest() checks the
// final 32 bytes against the SHA-256 of everything before them and trims
// them off, so reads never touch the trailer.
class ByteReader {
 public:
  explicit ByteReader(std::string data) : buf_(std::move(data)) {}

  void verify_trailing_digest(const std::string& what) {
    if (buf_.size() < 32) throw IoError(what + ": file too short");
    const std::string_view body(buf_.data(), buf_.size() - 32);
    const auto expect = Sha256::digest(body);
    if (std::memcmp(expect.data(), buf_.data() + buf_.size() - 32, 32) != 0) {
      throw IoError(what + ": trailing digest mismatch (corrupt file)");
    }
    end_ = buf_.size() - 32;
  }

  std::uint8_t u8() { return std::uint8_t(take(1)[0]); }
  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return std::int32_t(u32()); }
  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }
  std::int64_t i64() { return std::int64_t(u64()); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void expect_magic(const char tag[5], const std::string& what) {
    const char* p = take(4);
    if (std::memcmp(p, tag, 4) != 0) {
      throw IoError(what + ": bad magic");
    }
  }
  std::string str() {
    const std::uint32_t n = u32();
    return std::string(take(n), n);
  }
  const char* take(std::size_t n) {
    if (pos_ + n > end_) throw IoError("unexpected end of file");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == end_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

std::string read_file(const std::filesystem::path& path);

// Write via a temp file in the same directory plus rename, so concurrent
// readers observe either the old file or the new one.
void atomic_write_file(const std::filesystem::path& path,
                       std::string_view bytes);

void append_to_file(const std::filesystem::path& path, std::string_view line);

}  // namespace aswap
