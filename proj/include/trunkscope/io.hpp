// File helpers and little-endian byte packing for the binary containers.
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "trunkscope/numerics.hpp"

namespace trunkscope {

class IoError : public Error {
 public:
  using Error::Error;
};

std::string read_file(const std::filesystem::path& path);
// Writes through a sibling temp file and renames over the target.
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Plain comma-separated rows without quoting; blank lines are dropped and a
// trailing '\r' is stripped.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::vector<std::string> split_csv_line(std::string_view line);

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
}

inline void put_f64(std::string& out, double x) {
  put_le(out, std::bit_cast<std::uint64_t>(x));
}

// Bounds-checked cursor; E is thrown on truncation.
template <typename E>
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(T);
    return value;
  }

  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw E(context_ + " truncated while reading " + what + " at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace trunkscope
