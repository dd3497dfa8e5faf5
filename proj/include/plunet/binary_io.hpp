#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <type_traits>

namespace plunet::io {

template <class U>
U byteswap(U value) {
  static_assert(std::is_unsigned_v<U>);
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | ((value >> (8 * i)) & 0xFF));
  }
  return out;
}

template <class U>
U to_little(U value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    return byteswap(value);
  }
}

// Writes an unsigned integer or IEEE float little-endian.
template <class V>
void write_le(std::ostream& os, V value) {
  using Bits = std::conditional_t<sizeof(V) == 1, std::uint8_t,
               std::conditional_t<sizeof(V) == 2, std::uint16_t,
               std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>>;
  Bits bits = to_little(std::bit_cast<Bits>(value));
  os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
}

template <class V>
V read_le(std::istream& is) {
  using Bits = std::conditional_t<sizeof(V) == 1, std::uint8_t,
               std::conditional_t<sizeof(V) == 2, std::uint16_t,
               std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>>;
  Bits bits{};
  is.read(reinterpret_cast<char*>(&bits), sizeof(bits));
  if (!is) throw std::runtime_error("unexpected end of stream");
  return std::bit_cast<V>(to_little(bits));
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(std::string("bad magic: not a ") + what);
  }
}

}  // namespace plunet::io
