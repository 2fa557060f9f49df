#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "mogen/tensor.hpp"

namespace mogen {

// Tensor wire format: magic "HSTF", version u16, dtype tag u8 (1 = f32,
// 2 = f64), rank u8, extents as little-endian u64, then little-endian payload.

namespace io {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("read: unexpected end of stream");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_pod<std::uint16_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw DataError("read: unexpected end of stream");
  return s;
}

}  // namespace io

template <typename S>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<S, float>) return 1;
  else return 2;
}

constexpr std::uint16_t kTensorFormatVersion = 1;

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write("HSTF", 4);
  io::write_pod<std::uint16_t>(os, kTensorFormatVersion);
  io::write_pod<std::uint8_t>(os, dtype_tag<S>());
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::int64_t e : t.shape()) io::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(t.numel())));
}

// Reads a tensor, converting the payload to S if it was stored at the other
// precision.
template <typename S>
Tensor<S> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "HSTF", 4) != 0) throw DataError("tensor: bad magic");
  const auto version = io::read_pod<std::uint16_t>(is);
  if (version != kTensorFormatVersion)
    throw DataError("tensor: unsupported version " + std::to_string(version));
  const auto tag = io::read_pod<std::uint8_t>(is);
  const auto rank = io::read_pod<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::int64_t>(io::read_pod<std::uint64_t>(is));
  const std::int64_t n = shape_numel(shape);
  if (tag == dtype_tag<S>()) {
    std::vector<S> v(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(S) * v.size()));
    if (!is) throw DataError("tensor: truncated payload");
    return Tensor<S>::from_data(std::move(shape), std::move(v));
  }
  if (tag == 1) {
    std::vector<float> v(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(float) * v.size()));
    if (!is) throw DataError("tensor: truncated payload");
    std::vector<S> o(v.begin(), v.end());
    return Tensor<S>::from_data(std::move(shape), std::move(o));
  }
  if (tag == 2) {
    std::vector<double> v(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * v.size()));
    if (!is) throw DataError("tensor: truncated payload");
    std::vector<S> o(v.begin(), v.end());
    return Tensor<S>::from_data(std::move(shape), std::move(o));
  }
  throw DataError("tensor: unknown dtype tag " + std::to_string(tag));
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for write: " + path);
  write_tensor(os, t);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for read: " + path);
  return read_tensor<S>(is);
}

}  // namespace mogen
