#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "madan/errors.hpp"

namespace madan::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

/// Appends little-endian encodings to a byte buffer.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u8(std::uint8_t v) { uint(v); }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  const std::vector<char>& buffer() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

/// Bounds-checked little-endian reader; failures report the byte offset.
class ByteReader {
 public:
  ByteReader(const std::vector<char>& buf, std::string context) : buf_(buf), context_(std::move(context)) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError(context_ + ": truncated while reading " + std::string(what) + " at byte offset " +
                        std::to_string(pos_) + " (need " + std::to_string(n) + ", have " +
                        std::to_string(remaining()) + ")");
    }
  }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(buf_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError(context_ + ": bad magic at byte offset " + std::to_string(pos_) + ", expected \"" +
                        std::string(magic) + "\"");
    }
    pos_ += magic.size();
  }

  template <typename U>
  U uint(std::string_view what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(U);
    return v;
  }
  std::uint8_t u8(std::string_view what) { return uint<std::uint8_t>(what); }
  std::uint16_t u16(std::string_view what) { return uint<std::uint16_t>(what); }
  std::uint32_t u32(std::string_view what) { return uint<std::uint32_t>(what); }
  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }

  std::string str(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(context_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

  void expect_end() const {
    if (remaining() != 0) fail("unexpected trailing bytes");
  }

 private:
  const std::vector<char>& buf_;
  std::string context_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failure on " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  auto buf = read_file(path);
  return std::string(buf.begin(), buf.end());
}

}  // namespace madan::io
