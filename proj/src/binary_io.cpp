#include "ednil/binary_io.hpp"

#include <array>

namespace ednil::io {

namespace {

void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  std::array<char, 8> buf{};
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(buf.data(), bytes);
}

std::uint64_t get_le(const unsigned char* bytes, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put_le(out, v, 4); }
void write_u64(std::ostream& out, std::uint64_t v) { put_le(out, v, 8); }
void write_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v), 8); }

std::uint32_t decode_be32(const unsigned char* b) {
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

void Reader::read_bytes(void* dst, std::size_t n, const char* what) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got != n) {
    throw FormatError(std::string("truncated input while reading ") + what, offset_ + got);
  }
  offset_ += n;
}

std::uint32_t Reader::u32(const char* what) {
  unsigned char b[4];
  read_bytes(b, 4, what);
  return static_cast<std::uint32_t>(get_le(b, 4));
}

std::uint64_t Reader::u64(const char* what) {
  unsigned char b[8];
  read_bytes(b, 8, what);
  return get_le(b, 8);
}

double Reader::f64(const char* what) { return std::bit_cast<double>(u64(what)); }

std::string Reader::string(std::size_t n, const char* what) {
  std::string s(n, '\0');
  read_bytes(s.data(), n, what);
  return s;
}

}  // namespace ednil::io
