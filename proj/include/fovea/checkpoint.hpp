#pragma once

#include "fovea/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fovea {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat binary parameter container:
///   "FVRB" | version u32 | entry count u32
///   per entry: name len u16 | name | dtype u8 (0=f32,1=f64) | rank u8 |
///              dims u32... | little-endian payload
/// All integers little-endian.
namespace checkpoint {

constexpr uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(reinterpret_cast<char*>(b), sizeof(T));  // host is little-endian
}

template <typename T>
T take(const std::string& buf, size_t& off) {
  if (off + sizeof(T) > buf.size()) throw FormatError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

template <typename S>
std::string serialize(const std::vector<std::pair<std::string, const Tensor<S>*>>& entries) {
  std::string buf;
  buf.append("FVRB", 4);
  detail::put<uint32_t>(buf, kVersion);
  detail::put<uint32_t>(buf, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::put<uint16_t>(buf, static_cast<uint16_t>(name.size()));
    buf.append(name);
    detail::put<uint8_t>(buf, sizeof(S) == 4 ? 0 : 1);
    detail::put<uint8_t>(buf, static_cast<uint8_t>(tensor->rank()));
    for (long d : tensor->shape) detail::put<uint32_t>(buf, static_cast<uint32_t>(d));
    buf.append(reinterpret_cast<const char*>(tensor->ptr()),
               static_cast<size_t>(tensor->numel()) * sizeof(S));
  }
  return buf;
}

template <typename S>
std::map<std::string, Tensor<S>> deserialize(const std::string& buf) {
  size_t off = 0;
  if (buf.size() < 12 || buf.compare(0, 4, "FVRB") != 0)
    throw FormatError("checkpoint: bad magic");
  off = 4;
  const uint32_t version = detail::take<uint32_t>(buf, off);
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = detail::take<uint32_t>(buf, off);
  std::map<std::string, Tensor<S>> out;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t nlen = detail::take<uint16_t>(buf, off);
    if (off + nlen > buf.size()) throw FormatError("checkpoint: truncated name");
    std::string name(buf.data() + off, nlen);
    off += nlen;
    const uint8_t dtype = detail::take<uint8_t>(buf, off);
    if (dtype != 0 && dtype != 1) throw FormatError("checkpoint: unknown dtype tag");
    const uint8_t rank = detail::take<uint8_t>(buf, off);
    Shape shape;
    for (uint8_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<long>(detail::take<uint32_t>(buf, off)));
    Tensor<S> t(shape);
    const size_t want = static_cast<size_t>(t.numel());
    if (dtype == 0) {
      if (off + want * 4 > buf.size()) throw FormatError("checkpoint: truncated payload");
      for (size_t j = 0; j < want; ++j) {
        float v;
        std::memcpy(&v, buf.data() + off + j * 4, 4);
        t[static_cast<long>(j)] = static_cast<S>(v);
      }
      off += want * 4;
    } else {
      if (off + want * 8 > buf.size()) throw FormatError("checkpoint: truncated payload");
      for (size_t j = 0; j < want; ++j) {
        double v;
        std::memcpy(&v, buf.data() + off + j * 8, 8);
        t[static_cast<long>(j)] = static_cast<S>(v);
      }
      off += want * 8;
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

template <typename S>
void save(const std::string& path,
          const std::vector<std::pair<std::string, const Tensor<S>*>>& entries) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
  const std::string buf = serialize(entries);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError("checkpoint: write failed for " + path);
}

template <typename S>
std::map<std::string, Tensor<S>> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize<S>(buf);
}

}  // namespace checkpoint

/// Save/restore the full network state (parameters + BN running statistics).
template <typename S, typename Net>
void save_network(const std::string& path, Net& net) {
  std::vector<std::pair<std::string, const Tensor<S>*>> entries;
  for (auto& [name, tensor] : net.state_entries()) entries.emplace_back(name, tensor);
  checkpoint::save<S>(path, entries);
}

template <typename S, typename Net>
void load_network(const std::string& path, Net& net) {
  auto loaded = checkpoint::load<S>(path);
  for (auto& [name, tensor] : net.state_entries()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("checkpoint: missing entry '" + name + "'");
    if (it->second.shape != tensor->shape)
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    *tensor = it->second;
  }
}

}  // namespace fovea
