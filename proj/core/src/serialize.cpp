#include "segkey/serialize.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "segkey/error.hpp"

namespace segkey {
namespace {

constexpr std::array<char, 4> kTensorMagic{'S', 'G', 'T', '1'};

template <typename U>
void write_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes;
  const auto offset = in.tellg();
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError(std::string("truncated ") + what + " at byte offset " +
                      std::to_string(static_cast<long long>(offset)));
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) {
  write_le(out, std::bit_cast<std::uint64_t>(v));
}
std::uint32_t read_u32(std::istream& in) {
  return read_le<std::uint32_t>(in, "u32");
}
std::uint64_t read_u64(std::istream& in) {
  return read_le<std::uint64_t>(in, "u64");
}
double read_f64(std::istream& in) {
  return std::bit_cast<double>(read_le<std::uint64_t>(in, "f64"));
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic.data(), kTensorMagic.size());
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) write_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  const auto offset = in.tellg();
  if (!in.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw FormatError("bad tensor magic at byte offset " +
                      std::to_string(static_cast<long long>(offset)));
  }
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) d = read_u32(in);
  if (shape_numel(shape) > (std::size_t{1} << 28)) {
    throw FormatError("tensor " + shape_string(shape) + " exceeds size limit");
  }
  Tensor t(shape);
  for (double& v : t.data()) v = read_f64(in);
  return t;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32(const std::string& bytes) {
  return crc32(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

}  // namespace segkey
