#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

// Little-endian primitives shared by the binary file formats. Readers take
// the file kind ("checkpoint", "trial file") plus the section being read so
// truncation errors can name what is missing.

namespace fedbs::ioutil {

inline void write_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  }
  os.write(reinterpret_cast<const char*>(b), 8);
}

[[noreturn]] inline void throw_truncated(const char* kind, const char* what) {
  throw std::runtime_error(std::string("truncated ") + kind + ": " + what);
}

inline std::uint16_t read_u16(std::istream& is, const char* kind,
                              const char* what) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw_truncated(kind, what);
  return static_cast<std::uint16_t>(b[0] |
                                    (static_cast<std::uint16_t>(b[1]) << 8));
}

inline std::uint32_t read_u32(std::istream& is, const char* kind,
                              const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw_truncated(kind, what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline double read_f64(std::istream& is, const char* kind, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw_truncated(kind, what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  }
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace fedbs::ioutil
