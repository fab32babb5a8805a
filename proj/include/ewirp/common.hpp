#pragma once

#include <cstdint>
#include <cstring>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ewirp {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

// Fixed 64-byte alignment for every buffer that vectorized kernels touch.
// Reduction order inside those kernels depends on pointer alignment, so a
// fixed alignment is what makes re-runs bitwise reproducible regardless of
// heap history.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const { return true; }
  template <class U>
  bool operator!=(const AlignedAlloc<U>&) const { return false; }
};

template <class T>
using AVec = std::vector<T, AlignedAlloc<T>>;

namespace detail {

// Little-endian byte serialization shared by the checkpoint and wire formats.
template <class T>
void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const u8* p) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  u32 bits;
  std::memcpy(&bits, &f, 4);
  put_le(out, bits);
}

inline float get_f32(const u8* p) {
  const u32 bits = get_le<u32>(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline void cat_into(std::ostringstream&) {}

template <class T, class... Rest>
void cat_into(std::ostringstream& oss, const T& head, const Rest&... rest) {
  oss << head;
  cat_into(oss, rest...);
}

}  // namespace detail

// Builds a message from mixed pieces; used for error reporting throughout.
template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream oss;
  detail::cat_into(oss, args...);
  return oss.str();
}

template <class... Args>
void require(bool cond, const Args&... args) {
  if (!cond) throw std::invalid_argument(cat(args...));
}

}  // namespace ewirp
