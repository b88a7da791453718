#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "scl/tensor.hpp"

// Binary tensor-record encoding shared by checkpoints and dataset sample
// files. All integers and values are little endian; see docs/formats.md.

namespace scl::detail {

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little endian; big endian hosts are unsupported");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("corrupt file: truncated while reading u32");
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("corrupt file: truncated while reading u64");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const std::uint64_t len = read_u64(is);
  std::string s(len, '\0');
  if (len > 0 && !is.read(s.data(), static_cast<std::streamsize>(len)))
    throw std::runtime_error("corrupt file: truncated while reading string");
  return s;
}

// Record layout: name (u64 length + bytes), u32 dtype code (0 = f32,
// 1 = f64), u32 rank, u64 extents, raw values.
template <typename T>
void write_tensor_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  write_string(os, name);
  write_u32(os, dtype_code<T>());
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) write_u64(os, static_cast<std::uint64_t>(t.extent(a)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(static_cast<std::uint64_t>(t.size()) * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor_record(std::istream& is, std::string& name_out) {
  name_out = read_string(is);
  const std::uint32_t dtype = read_u32(is);
  if (dtype != dtype_code<T>())
    throw std::runtime_error("tensor '" + name_out + "' has dtype code " +
                             std::to_string(dtype) + ", expected " +
                             std::to_string(dtype_code<T>()));
  const std::uint32_t rank = read_u32(is);
  if (rank > 16) throw std::runtime_error("corrupt file: implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<i64>(read_u64(is));
  Tensor<T> t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(static_cast<std::uint64_t>(t.size()) * sizeof(T))))
    throw std::runtime_error("corrupt file: truncated tensor payload in '" + name_out + "'");
  return t;
}

}  // namespace scl::detail
