#pragma once

// Minimal reader/writer for the safetensors container: an 8-byte
// little-endian header length, a JSON header mapping tensor names to
// {dtype, shape, data_offsets}, then the raw row-major data.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "siblurry/types.hpp"

namespace siblurry {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;  // row-major

  std::int64_t numel() const;

  /// Leading singleton axes are squeezed, then the tensor is viewed as
  /// [shape[0] x prod(shape[1:])]. A 1-D tensor becomes a single row.
  Matrix as_matrix() const;
  static Tensor from_matrix(const Matrix& m);
};

struct TensorFile {
  std::map<std::string, Tensor> tensors;
  /// Integer-valued tensors written with dtype I64 instead of F64.
  std::map<std::string, std::vector<std::int64_t>> int_tensors;
  std::map<std::string, std::string> metadata;
};

/// Reads F64, F32 and I64 tensors. Other dtypes raise LoadError.
TensorFile read_safetensors(const std::filesystem::path& path);

void write_safetensors(const std::filesystem::path& path, const TensorFile& file);

}  // namespace siblurry
