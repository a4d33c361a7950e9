#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// In-memory form of a DPAC file.
///
/// Layout (all integers little-endian):
///   "DPAC" | version u16 | tag u8 | epoch u32 | count u32 |
///   count x ( name_len u16 | utf-8 name | rank u8 | dims u32[rank] | f64[prod(dims)] )
struct TensorFile {
  static constexpr std::uint16_t kVersion = 1;

  char tag = 0;
  std::uint32_t epoch = 0;
  std::vector<NamedTensor> tensors;

  const Tensor& get(std::string_view name) const;
};

std::string encode_dpac(const TensorFile& file);
TensorFile decode_dpac(std::string_view bytes);

void write_dpac(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_dpac(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// Little-endian f64 payload of a tensor, used for hashing and base64 export.
std::string tensor_bytes(const Tensor& t);
Tensor tensor_from_bytes(const Shape& shape, std::string_view bytes);

}  // namespace dpa
