#pragma once

#include <array>
#include <optional>

#include "ewirp/codec.hpp"

namespace ewirp {

// Wire formats (all little-endian):
//   symbol frame: "EWIR" | version u8 | flags u8 (bit0: h present) | B u32 |
//                 [h re f32, h im f32] | B x (I f32, Q f32) | crc32 u32
//   reply frame:  "EWIR" | type u8 | 5 x (class u16, prob f32) | crc32 u32
// The CRC covers everything before it.
constexpr u8 kFrameVersion = 1;
constexpr u8 kFlagHasH = 0x01;
constexpr u32 kMaxFrameSymbols = 1u << 24;
constexpr u8 kReplyTopk = 1;
constexpr u8 kReplyError = 2;

inline u32 crc32_ieee(const u8* p, size_t n, u32 crc = 0) {
  crc = ~crc;
  for (size_t i = 0; i < n; ++i) {
    crc ^= p[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xEDB88320u & (~(crc & 1) + 1));
  }
  return ~crc;
}

inline u32 crc32_ieee(const std::string& s) {
  return crc32_ieee(reinterpret_cast<const u8*>(s.data()), s.size());
}

inline std::string encode_frame(const ComplexSymbolBlock& blk,
                                const std::optional<std::complex<double>>& h = std::nullopt) {
  const size_t b = blk.symbols.size();
  require(b >= 1 && b <= kMaxFrameSymbols, "frame symbol count ", b, " outside [1, ",
          kMaxFrameSymbols, "]");
  std::string out;
  out.reserve(14 + (h ? 8 : 0) + 8 * b + 4);
  out.append("EWIR");
  out.push_back(static_cast<char>(kFrameVersion));
  out.push_back(static_cast<char>(h ? kFlagHasH : 0));
  detail::put_le(out, static_cast<u32>(b));
  if (h) {
    detail::put_f32(out, static_cast<float>(h->real()));
    detail::put_f32(out, static_cast<float>(h->imag()));
  }
  for (const auto& z : blk.symbols) {
    detail::put_f32(out, static_cast<float>(z.real()));
    detail::put_f32(out, static_cast<float>(z.imag()));
  }
  detail::put_le(out, crc32_ieee(reinterpret_cast<const u8*>(out.data()), out.size()));
  return out;
}

struct FrameDecode {
  enum class Status { ok, need_more, error };
  Status status = Status::need_more;
  size_t consumed = 0;  // bytes to drop from the stream when ok or error
  std::string reason;
  ComplexSymbolBlock block;
  std::optional<std::complex<double>> h;
};

// Streaming decode: returns need_more until a full frame is buffered; on a
// malformed header the whole buffer cannot be trusted, so consumed stays 0
// and the caller should drop the connection.
inline FrameDecode decode_frame(const u8* data, size_t n) {
  FrameDecode r;
  if (n < 10) return r;
  if (std::memcmp(data, "EWIR", 4) != 0) {
    r.status = FrameDecode::Status::error;
    r.reason = "bad magic";
    return r;
  }
  const u8 version = data[4], flags = data[5];
  if (version != kFrameVersion) {
    r.status = FrameDecode::Status::error;
    r.reason = cat("unsupported version ", int(version));
    return r;
  }
  const u32 b = detail::get_le<u32>(data + 6);
  if (b < 1 || b > kMaxFrameSymbols) {
    r.status = FrameDecode::Status::error;
    r.reason = cat("symbol count ", b, " out of bounds");
    return r;
  }
  const size_t h_bytes = (flags & kFlagHasH) ? 8 : 0;
  const size_t total = 10 + h_bytes + 8 * static_cast<size_t>(b) + 4;
  if (n < total) return r;
  const u32 want = detail::get_le<u32>(data + total - 4);
  const u32 got = crc32_ieee(data, total - 4);
  if (want != got) {
    r.status = FrameDecode::Status::error;
    r.reason = "crc mismatch";
    r.consumed = total;
    return r;
  }
  size_t pos = 10;
  if (h_bytes) {
    r.h = std::complex<double>(detail::get_f32(data + pos), detail::get_f32(data + pos + 4));
    pos += 8;
  }
  r.block.symbols.resize(b);
  for (u32 i = 0; i < b; ++i) {
    r.block.symbols[i] = {detail::get_f32(data + pos), detail::get_f32(data + pos + 4)};
    pos += 8;
  }
  r.status = FrameDecode::Status::ok;
  r.consumed = total;
  return r;
}

using TopEntries = std::array<std::pair<u16, float>, 5>;

inline std::string encode_reply(u8 type, const TopEntries& top) {
  std::string out;
  out.reserve(39);
  out.append("EWIR");
  out.push_back(static_cast<char>(type));
  for (const auto& [cls, prob] : top) {
    detail::put_le(out, cls);
    detail::put_f32(out, prob);
  }
  detail::put_le(out, crc32_ieee(reinterpret_cast<const u8*>(out.data()), out.size()));
  return out;
}

struct ReplyDecode {
  enum class Status { ok, need_more, error };
  Status status = Status::need_more;
  size_t consumed = 0;
  std::string reason;
  u8 type = 0;
  TopEntries top{};
};

constexpr size_t kReplyBytes = 4 + 1 + 5 * 6 + 4;

inline ReplyDecode decode_reply(const u8* data, size_t n) {
  ReplyDecode r;
  if (n < kReplyBytes) return r;
  if (std::memcmp(data, "EWIR", 4) != 0) {
    r.status = ReplyDecode::Status::error;
    r.reason = "bad magic";
    return r;
  }
  const u32 want = detail::get_le<u32>(data + kReplyBytes - 4);
  if (want != crc32_ieee(data, kReplyBytes - 4)) {
    r.status = ReplyDecode::Status::error;
    r.reason = "crc mismatch";
    r.consumed = kReplyBytes;
    return r;
  }
  r.type = data[4];
  size_t pos = 5;
  for (auto& [cls, prob] : r.top) {
    cls = detail::get_le<u16>(data + pos);
    prob = detail::get_f32(data + pos + 2);
    pos += 6;
  }
  r.status = ReplyDecode::Status::ok;
  r.consumed = kReplyBytes;
  return r;
}

}  // namespace ewirp
