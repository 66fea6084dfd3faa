// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "flatmae/common.hpp"

namespace flatmae {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// ---- little-endian stream writer ----
class ByteWriter {
 public:
  void magic(const char* tag, std::size_t len) { raw(tag, len); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  template <typename T>
  void span(const T* data, std::size_t count) {
    raw(data, count * sizeof(T));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  void to_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    if (!out) throw FormatError("write failed: " + path);
  }

 private:
  std::vector<std::uint8_t> buf_;
};

// ---- little-endian stream reader ----
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError("cannot open: " + path);
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> data(size);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
    if (!in) throw FormatError("read failed: " + path);
    return ByteReader(std::move(data));
  }

  void magic(const char* tag, std::size_t len) {
    if (pos_ + len > buf_.size() || std::memcmp(buf_.data() + pos_, tag, len) != 0)
      throw FormatError("bad magic, expected " + std::string(tag, tag + len - 1));
    pos_ += len;
  }
  bool peek_magic(const char* tag, std::size_t len) const {
    return pos_ + len <= buf_.size() && std::memcmp(buf_.data() + pos_, tag, len) == 0;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  void span(T* out, std::size_t count) {
    need(count * sizeof(T));
    std::memcpy(out, buf_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw FormatError("truncated input");
  }
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

// SHA-256 digest of a byte buffer (grid hashes in shard headers).
inline std::array<std::uint8_t, 32> sha256(const void* data, std::size_t len) {
  std::array<std::uint8_t, 32> out{};
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) != 1 || out_len != 32)
    throw Error("sha256 failed");
  return out;
}

inline std::string hex(const std::uint8_t* data, std::size_t len) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(len * 2);
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(digits[data[i] >> 4]);
    s.push_back(digits[data[i] & 0xF]);
  }
  return s;
}

}  // namespace flatmae
