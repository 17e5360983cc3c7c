#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "m2occ/tensor.hpp"

namespace m2occ {

// Little-endian primitive encoding shared by checkpoint and scene files.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);  // u32 length + bytes
  void bytes(const void* data, std::size_t n);
  // Shape header (u32 rank, u64 extents) followed by the float64 payload.
  void tensor(const Tensor& t);

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is) : is_(is) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  void bytes(void* data, std::size_t n);
  Tensor tensor();

 private:
  std::istream& is_;
};

}  // namespace m2occ
