#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bcos/error.hpp"

namespace bcos::io {

std::string read_file(const std::filesystem::path& path);

/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Little-endian encoding of fixed-width values, independent of the host.
template <typename U>
void put_le(std::string& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint16_t>>;
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::string_view bytes, std::size_t offset) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint16_t>>;
  if (offset + sizeof(U) > bytes.size()) throw Error(ErrorCode::TruncatedBlob, "read past end of data");
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<Bits>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return std::bit_cast<U>(bits);
}

/// Raw little-endian f32 array.
template <typename T>
std::string encode_f32(std::span<const T> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (T v : values) put_le(out, static_cast<float>(v));
  return out;
}

template <typename T>
std::vector<T> decode_f32(std::string_view bytes, std::size_t offset, std::size_t count) {
  if (offset + 4 * count > bytes.size()) throw Error(ErrorCode::TruncatedBlob, "blob shorter than declared");
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(get_le<float>(bytes, offset + 4 * i));
  return out;
}

}  // namespace bcos::io
