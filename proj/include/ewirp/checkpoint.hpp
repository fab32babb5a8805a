#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "ewirp/layers.hpp"

namespace ewirp {

// Checkpoint layout (all integers little-endian):
//   magic "EWCK", u32 version (1), u32 tensor count
//   per tensor, sorted by name:
//     u16 name length, name bytes, u8 rank, i32 dims, u64 byte offset
//   payload: all tensor values as f32, concatenated in manifest order
constexpr u32 kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const std::map<std::string, Tensor<float>>& tensors) {
  std::string head, payload;
  head.append("EWCK");
  detail::put_le(head, kCheckpointVersion);
  detail::put_le(head, static_cast<u32>(tensors.size()));
  u64 offset = 0;
  for (const auto& [name, t] : tensors) {
    require(name.size() <= 0xFFFF, "parameter name too long: ", name);
    detail::put_le(head, static_cast<u16>(name.size()));
    head.append(name);
    require(t.rank() <= 0xFF, "tensor rank too large for ", name);
    head.push_back(static_cast<char>(t.rank()));
    for (int d : t.shape) detail::put_le(head, static_cast<u32>(d));
    detail::put_le(head, offset);
    offset += static_cast<u64>(t.numel()) * 4;
    for (float v : t.v) detail::put_f32(payload, v);
  }
  return head + payload;
}

inline std::map<std::string, Tensor<float>> parse_checkpoint(const std::string& bytes) {
  const u8* p = reinterpret_cast<const u8*>(bytes.data());
  const size_t n = bytes.size();
  require(n >= 12, "checkpoint truncated (", n, " bytes)");
  require(std::memcmp(p, "EWCK", 4) == 0, "bad checkpoint magic");
  const u32 version = detail::get_le<u32>(p + 4);
  require(version == kCheckpointVersion, "unsupported checkpoint version ", version);
  const u32 count = detail::get_le<u32>(p + 8);
  size_t pos = 12;
  struct Entry {
    std::string name;
    std::vector<int> shape;
    u64 offset;
  };
  std::vector<Entry> entries;
  for (u32 i = 0; i < count; ++i) {
    require(pos + 2 <= n, "checkpoint manifest truncated");
    const u16 len = detail::get_le<u16>(p + pos);
    pos += 2;
    require(pos + len + 1 <= n, "checkpoint manifest truncated");
    Entry e;
    e.name.assign(bytes, pos, len);
    pos += len;
    const u8 rank = p[pos++];
    require(pos + 4 * static_cast<size_t>(rank) + 8 <= n, "checkpoint manifest truncated");
    for (u8 d = 0; d < rank; ++d) {
      e.shape.push_back(static_cast<int>(detail::get_le<u32>(p + pos)));
      pos += 4;
    }
    e.offset = detail::get_le<u64>(p + pos);
    pos += 8;
    entries.push_back(std::move(e));
  }
  const size_t payload = pos;
  std::map<std::string, Tensor<float>> out;
  for (const auto& e : entries) {
    Tensor<float> t(e.shape);
    const size_t start = payload + e.offset;
    require(start + 4 * static_cast<size_t>(t.numel()) <= n, "checkpoint payload truncated for ",
            e.name);
    for (i64 i = 0; i < t.numel(); ++i) t.v[i] = detail::get_f32(p + start + 4 * i);
    require(out.emplace(e.name, std::move(t)).second, "duplicate tensor ", e.name);
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const ParamStore<float>& ps) {
  std::map<std::string, Tensor<float>> tensors;
  for (const auto& [name, p] : ps.params) tensors.emplace(name, p.value);
  const std::string bytes = serialize_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "cannot create checkpoint ", path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), "write failure on ", path);
}

// Fills matching parameters. When `strict` the file and the store must agree
// exactly (same names, same shapes). Otherwise the load is a best-effort
// overlay: tensors without a slot or with a different shape are skipped, which
// lets a checkpoint seed a model whose codec dimensions differ.
inline void load_checkpoint(const std::string& path, ParamStore<float>& ps, bool strict = true) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open checkpoint ", path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  auto tensors = parse_checkpoint(bytes);
  for (auto& [name, t] : tensors) {
    auto it = ps.params.find(name);
    if (it == ps.params.end()) {
      require(!strict, "checkpoint tensor ", name, " has no parameter slot");
      continue;
    }
    if (it->second.value.shape != t.shape) {
      require(strict == false, "checkpoint shape ", shape_str(t.shape),
              " mismatches parameter ", name, " ", shape_str(it->second.value.shape));
      continue;
    }
    it->second.value = std::move(t);
  }
  if (strict)
    for (const auto& [name, p] : ps.params)
      require(tensors.count(name) != 0, "parameter ", name, " missing from checkpoint");
}

}  // namespace ewirp
