#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "segkey/tensor.hpp"

namespace segkey {

// "SGT1" | u32 rank | u32 dims[rank] | f64 payload, all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

// Little-endian primitives shared by the binary formats.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::uint32_t crc32(const std::string& bytes);

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace segkey
