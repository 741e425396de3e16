#include "beliefqa/io.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "beliefqa/errors.hpp"

namespace beliefqa {

BinaryWriter::BinaryWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
}

void BinaryWriter::u32(std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  bytes(b, 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  bytes(b, 8);
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw std::runtime_error("write failed on " + path_);
  offset_ += n;
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw std::runtime_error("close failed on " + path_);
}

BinaryReader::BinaryReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw FormatError("cannot open " + path + " for reading");
}

std::uint32_t BinaryReader::u32() {
  unsigned char b[4];
  bytes(b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  unsigned char b[8];
  bytes(b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

void BinaryReader::bytes(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError(path_ + ": truncated read at offset " +
                      std::to_string(offset_) + " (wanted " +
                      std::to_string(n) + " bytes, got " +
                      std::to_string(in_.gcount()) + ")");
  }
  offset_ += n;
}

bool BinaryReader::at_eof() {
  return in_.peek() == std::ifstream::traits_type::eof();
}

}  // namespace beliefqa
