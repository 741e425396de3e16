#pragma once

#include <cstdint>
#include <fstream>
#include <string>

namespace beliefqa {

// Little-endian binary file helpers used by the bank and checkpoint formats.
// Byte order is fixed by explicit shifts, independent of the host.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);

  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(const void* data, std::size_t n);

  std::uint64_t offset() const { return offset_; }
  void close();

 private:
  std::ofstream out_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);

  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  void bytes(void* data, std::size_t n);
  bool at_eof();

  std::uint64_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

}  // namespace beliefqa
