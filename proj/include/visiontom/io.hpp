#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "errors.hpp"

namespace vtom {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// FNV-1a, 64 bit.
class Hasher {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= c[i];
      h_ *= 1099511628211ULL;
    }
  }
  template <class T>
    requires std::is_arithmetic_v<T>
  void value(T v) {
    bytes(&v, sizeof v);
  }
  void text(const std::string& s) {
    value<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ULL;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  Hasher h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.bytes(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.digest();
}

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  template <class T>
  void put_array(const T* p, std::size_t n) {
    os_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void magic(const char (&m)[9]) { os_.write(m, 8); }

 private:
  std::ostream& os_;
};

class BinReader {
 public:
  explicit BinReader(std::istream& is) : is_(is) {}
  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    read(&v, sizeof v);
    return v;
  }
  template <class T>
  void get_array(T* p, std::size_t n) {
    read(p, n * sizeof(T));
  }
  std::string get_string() {
    auto n = get<std::uint32_t>();
    if (n > (1u << 24)) throw FormatError("string length out of range");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void expect_magic(const char (&m)[9]) {
    char got[8];
    read(got, 8);
    if (std::memcmp(got, m, 8) != 0) throw FormatError("bad magic, expected " + std::string(m, 8));
  }
  void expect_end() {
    if (is_.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes");
  }

 private:
  void read(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError("truncated file");
  }
  std::istream& is_;
};

}  // namespace vtom
