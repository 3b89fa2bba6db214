#pragma once

// Weight checkpoint file: magic "SSTN1", then per parameter:
//   u32 name length (little-endian), name bytes,
//   u32 rank, u32 per dimension, raw f32 little-endian data.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sstn/errors.hpp"
#include "sstn/tensor.hpp"

namespace sstn {

template <typename S>
using NamedParams = std::vector<std::pair<std::string, TensorT<S>>>;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw ParseError("truncated checkpoint " + path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const NamedParams<S>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write("SSTN1", 5);
  for (const auto& [name, t] : params) {
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      detail::put_u32(os, static_cast<uint32_t>(t.dim(i)));
    std::vector<float> buf(t.size());
    for (long i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.data()[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("write failed: " + path);
}

template <typename S>
NamedParams<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, "SSTN1", 5) != 0)
    throw ParseError("bad checkpoint magic in " + path);
  NamedParams<S> out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    uint32_t nlen = detail::get_u32(is, path);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw ParseError("truncated checkpoint " + path);
    uint32_t rank = detail::get_u32(is, path);
    Shape shape(rank);
    long n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = detail::get_u32(is, path);
      n *= shape[i];
    }
    std::vector<float> buf(n);
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw ParseError("truncated checkpoint " + path + " at parameter " + name);
    std::vector<S> data(n);
    for (long i = 0; i < n; ++i) data[i] = static_cast<S>(buf[i]);
    out.emplace_back(std::move(name),
                     TensorT<S>::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

// Copies values from `loaded` into matching names of `params`.
template <typename S>
void apply_checkpoint(NamedParams<S>& params, const NamedParams<S>& loaded) {
  for (auto& [name, t] : params) {
    bool found = false;
    for (const auto& [lname, lt] : loaded) {
      if (lname != name) continue;
      if (lt.shape() != t.shape())
        throw DimensionError("checkpoint parameter " + name + " has shape " +
                             shape_str(lt.shape()) + ", expected " +
                             shape_str(t.shape()));
      std::memcpy(t.data(), lt.data(), sizeof(S) * t.size());
      found = true;
      break;
    }
    if (!found) throw ParseError("checkpoint is missing parameter " + name);
  }
}

}  // namespace sstn
