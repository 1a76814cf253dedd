#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace crate::io {

// Explicit little-endian encoding so files are portable regardless of host order.

template <class U>
void put_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
bool get_le(std::istream& is, U& value) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

inline void put_f32(std::ostream& os, float value) { put_le(os, std::bit_cast<std::uint32_t>(value)); }

inline bool get_f32(std::istream& is, float& value) {
  std::uint32_t bits = 0;
  if (!get_le(is, bits)) return false;
  value = std::bit_cast<float>(bits);
  return true;
}

inline void put_f32s(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) put_f32(os, v);
  }
}

inline bool get_f32s(std::istream& is, std::span<float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    return static_cast<bool>(is.read(reinterpret_cast<char*>(values.data()),
                                     static_cast<std::streamsize>(values.size() * sizeof(float))));
  } else {
    for (float& v : values)
      if (!get_f32(is, v)) return false;
    return true;
  }
}

}  // namespace crate::io
