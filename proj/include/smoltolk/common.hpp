#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smoltolk {

using i32 = std::int32_t;
using i64 = std::int64_t;
using u8 = std::uint8_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

using Shape = std::vector<i64>;

// ---------------------------------------------------------------------------
// Errors. One exception hierarchy; the CLI maps categories to exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct ValueError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline i64 numel_of(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Hashing / checksums
// ---------------------------------------------------------------------------

inline u64 fnv1a64(const void* data, size_t len, u64 seed = 0xcbf29ce484222325ull) {
  const u8* p = static_cast<const u8*>(data);
  u64 h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline u64 fnv1a64(const std::string& s, u64 seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

u32 crc32(const void* data, size_t len, u32 seed = 0);

// ---------------------------------------------------------------------------
// Fixed-tree (pairwise) summation: deterministic for a given input length
// regardless of thread count, and more accurate than serial accumulation.
// ---------------------------------------------------------------------------

template <class S>
S fixed_tree_sum(const S* x, i64 n) {
  if (n <= 8) {
    S acc = 0;
    for (i64 i = 0; i < n; ++i) acc += x[i];
    return acc;
  }
  i64 half = n / 2;
  return fixed_tree_sum(x, half) + fixed_tree_sum(x + half, n - half);
}

template <class S>
S fixed_tree_sum(std::span<const S> x) {
  return fixed_tree_sum(x.data(), static_cast<i64>(x.size()));
}

// ---------------------------------------------------------------------------
// Binary file helpers (little-endian framing) and atomic writes
// ---------------------------------------------------------------------------

struct BinWriter {
  std::string buf;
  void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    raw(&v, sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<u32>(s.size()));
    raw(s.data(), s.size());
  }
};

struct BinReader {
  const char* p;
  const char* end;
  explicit BinReader(std::span<const char> s) : p(s.data()), end(s.data() + s.size()) {}
  void raw(void* out, size_t n) {
    if (p + n > end) throw IoError("truncated binary record");
    std::memcpy(out, p, n);
    p += n;
  }
  template <class T>
  T pod() {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string str() {
    u32 n = pod<u32>();
    if (p + n > end) throw IoError("truncated string in binary record");
    std::string s(p, n);
    p += n;
    return s;
  }
  bool at_end() const { return p == end; }
};

// Write via temp file + rename so readers never observe a partial file.
void atomic_write_file(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace smoltolk
