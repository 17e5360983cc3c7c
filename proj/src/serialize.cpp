#include "m2occ/serialize.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "m2occ/errors.hpp"

namespace m2occ {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxString = 1u << 20;

}  // namespace

void BinaryWriter::bytes(const void* data, std::size_t n) {
  os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}
void BinaryWriter::u8(std::uint8_t v) { bytes(&v, 1); }
void BinaryWriter::u32(std::uint32_t v) {
  v = to_little(v);
  bytes(&v, sizeof v);
}
void BinaryWriter::u64(std::uint64_t v) {
  v = to_little(v);
  bytes(&v, sizeof v);
}
void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void BinaryWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}
void BinaryWriter::tensor(const Tensor& t) {
  u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) u64(e);
  for (double v : t.data()) f64(v);
}

void BinaryReader::bytes(void* data, std::size_t n) {
  is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!is_) throw FormatError("unexpected end of binary stream");
}
std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}
std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, sizeof v);
  return to_little(v);
}
std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, sizeof v);
  return to_little(v);
}
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }
std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  if (n > kMaxString) throw FormatError("string record too long");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}
Tensor BinaryReader::tensor() {
  const std::uint32_t rank = u32();
  if (rank == 0 || rank > kMaxRank) throw FormatError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    e = u64();
    if (e == 0 || e > (1ULL << 32)) throw FormatError("bad tensor extent");
    n *= e;
    if (n > (1ULL << 32)) throw FormatError("tensor too large");
  }
  std::vector<double> data(n);
  for (double& v : data) v = f64();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace m2occ
