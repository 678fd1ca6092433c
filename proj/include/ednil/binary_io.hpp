#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "ednil/errors.hpp"

namespace ednil::io {

// Little-endian writers.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);

// Big-endian u32, as used by IDX headers.
std::uint32_t decode_be32(const unsigned char* bytes);

// Reader that tracks its byte offset and raises FormatError on short reads.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void read_bytes(void* dst, std::size_t n, const char* what);
  std::uint32_t u32(const char* what);
  std::uint64_t u64(const char* what);
  double f64(const char* what);
  std::string string(std::size_t n, const char* what);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace ednil::io
