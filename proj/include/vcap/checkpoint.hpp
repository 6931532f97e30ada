#pragma once

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/featio.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

/// Named float32 tensors plus string metadata (branch, vocab hash, step,
/// config echo).
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> params;
  std::map<std::string, std::string> meta;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw ValueError("checkpoint has no parameter " + name);
  }

  const std::string& get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint metadata missing key " + key);
    return it->second;
  }

  std::size_t get_size(const std::string& key) const { return detail::parse_size(get(key), key); }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(len)));
}

// CKP1 layout, little-endian:
//   "CKP1", u32 param count,
//   per param: u32 name length, name, u32 rank, u32 dims..., f32 payload,
//   u32 meta count, per entry: u32 key length, key, u32 value length, value,
//   u32 CRC32 of everything before it.
inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "CKP1";
  std::set<std::string> names;
  detail::put_u32(out, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    if (!names.insert(name).second) throw ValueError("duplicate checkpoint parameter " + name);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data) detail::put_f32(out, f);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_u32(out, static_cast<std::uint32_t>(k.size()));
    out += k;
    detail::put_u32(out, static_cast<std::uint32_t>(v.size()));
    out += v;
  }
  detail::put_u32(out, crc32_of(out, out.size()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CKP1") != 0) throw FormatError("bad checkpoint magic, expected CKP1");
  if (bytes.size() < 12) throw FormatError("checkpoint truncated");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t body = bytes.size() - 4;
  if (detail::get_u32(base + body) != crc32_of(bytes, body)) throw FormatError("checkpoint checksum mismatch");

  std::size_t pos = 4;
  auto need = [&](std::size_t n) {
    if (pos + n > body) throw FormatError("checkpoint truncated");
  };
  auto u32 = [&] {
    need(4);
    auto v = detail::get_u32(base + pos);
    pos += 4;
    return v;
  };
  auto str = [&] {
    const std::size_t n = u32();
    need(n);
    std::string s(bytes.data() + pos, n);
    pos += n;
    return s;
  };

  Checkpoint c;
  const std::size_t count = u32();
  std::set<std::string> names;
  for (std::size_t i = 0; i < count; ++i) {
    auto name = str();
    if (!names.insert(name).second) throw FormatError("duplicate checkpoint parameter " + name);
    const std::size_t rank = u32();
    Shape shape;
    for (std::size_t r = 0; r < rank; ++r) shape.push_back(u32());
    const std::size_t n = shape_size(shape);
    need(4 * n);
    std::vector<float> data(n);
    for (auto& f : data) {
      f = detail::get_f32(base + pos);
      pos += 4;
    }
    c.params.emplace_back(name, Tensor<float>(shape, std::move(data)));
  }
  const std::size_t metas = u32();
  for (std::size_t i = 0; i < metas; ++i) {
    auto k = str();
    c.meta[k] = str();
  }
  if (pos != body) throw FormatError("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  detail::write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

template <class T>
std::vector<std::pair<std::string, Tensor<float>>> export_params(const ParameterStore<T>& s) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.emplace_back(s[i].name, s[i].value.template cast<float>());
  return out;
}

/// Copy checkpoint tensors into an existing store. Every store parameter
/// must be present with the same shape.
template <class T>
void import_params(ParameterStore<T>& s, const Checkpoint& c) {
  if (c.params.size() != s.size())
    throw ShapeError("checkpoint has " + std::to_string(c.params.size()) + " parameters, model expects " +
                     std::to_string(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& p = s[i];
    const auto& t = c.tensor(p.name);
    if (t.shape != p.value.shape)
      throw ShapeError("parameter " + p.name + ": checkpoint shape " + shape_str(t.shape) + ", model shape " +
                       shape_str(p.value.shape));
    p.value = t.template cast<T>();
  }
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace vcap
