#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "fxmm/error.hpp"

// Little-endian binary record helpers shared by the store cache and
// checkpoint formats. Short reads surface as parse errors naming the record.
namespace fxmm::binio {

inline std::ofstream open_write(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path);
  return in;
}

template <class T>
void write_pod(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T read_pod(std::istream& in, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw parse_error(std::string("truncated while reading ") + what);
  return value;
}

template <class T>
void write_array(std::ostream& out, const T* data, std::size_t count) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

template <class T>
void read_array(std::istream& in, T* data, std::size_t count, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (!in) throw parse_error(std::string("truncated while reading ") + what);
}

inline void write_str(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& in, const char* what) {
  auto len = read_pod<std::uint32_t>(in, what);
  std::string s(len, '\0');
  if (len > 0) {
    in.read(s.data(), len);
    if (!in) throw parse_error(std::string("truncated while reading ") + what);
  }
  return s;
}

// FNV-1a over raw bytes; used for content-addressed cache names.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace fxmm::binio
