#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>

namespace ctdense {

// Little-endian append helpers.
template <typename U>
void put_le(std::string& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

// Bounds-checked little-endian reader; `ok()` turns false on the first overrun.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    static_assert(std::is_unsigned_v<U>);
    if (!take(sizeof(U))) return 0;
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ - sizeof(U) + i])) << (8 * i);
    }
    return value;
  }

  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string_view get_bytes(std::size_t n) {
    if (!take(n)) return {};
    return bytes_.substr(pos_ - n, n);
  }

  bool ok() const { return ok_; }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  bool take(std::size_t n) {
    if (!ok_ || n > bytes_.size() - pos_) {
      ok_ = false;
      return false;
    }
    pos_ += n;
    return true;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
  bool ok_ = true;
};

// Whole-file helpers; throw DataError with the path on failure.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ctdense
