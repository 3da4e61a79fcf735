#include "siblurry/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "siblurry/error.hpp"

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes little-endian");

namespace siblurry {

using json = nlohmann::json;

std::int64_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

Matrix Tensor::as_matrix() const {
  std::size_t first = 0;
  while (first + 1 < shape.size() && shape[first] == 1) ++first;
  Index rows = 1;
  Index cols = 1;
  if (shape.size() - first == 1 || shape.empty()) {
    cols = shape.empty() ? 1 : shape.back();
  } else {
    rows = shape[first];
    for (std::size_t i = first + 1; i < shape.size(); ++i) cols *= shape[i];
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(data.data(), rows, cols);
}

Tensor Tensor::from_matrix(const Matrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMajor>(t.data.data(), m.rows(), m.cols()) = m;
  return t;
}

TensorFile read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  const auto file_size = std::filesystem::file_size(path);
  if (!in || header_len > file_size - 8) throw LoadError("corrupt checkpoint header in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  const std::uint64_t data_size = file_size - 8 - header_len;
  std::vector<char> blob(data_size);
  in.read(blob.data(), static_cast<std::streamsize>(data_size));
  if (!in) throw LoadError("truncated checkpoint " + path.string());

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw LoadError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }

  TensorFile out;
  for (auto it = h.begin(); it != h.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it->begin(); m != it->end(); ++m) out.metadata[m.key()] = m->get<std::string>();
      continue;
    }
    const auto& entry = it.value();
    const auto dtype = entry.at("dtype").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
      throw LoadError("tensor '" + it.key() + "' has out-of-range offsets");
    }
    const std::int64_t n = std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    const std::size_t width = dtype == "F32" ? 4 : 8;
    if (dtype != "F32" && dtype != "F64" && dtype != "I64") {
      throw LoadError("tensor '" + it.key() + "' has unsupported dtype " + dtype);
    }
    if (offsets[1] - offsets[0] != static_cast<std::uint64_t>(n) * width) {
      throw LoadError("tensor '" + it.key() + "' size does not match its shape");
    }
    const char* src = blob.data() + offsets[0];
    if (dtype == "I64") {
      std::vector<std::int64_t> v(static_cast<std::size_t>(n));
      std::memcpy(v.data(), src, v.size() * 8);
      out.int_tensors[it.key()] = std::move(v);
      continue;
    }
    Tensor t;
    t.shape = shape;
    t.data.resize(static_cast<std::size_t>(n));
    if (dtype == "F64") {
      std::memcpy(t.data.data(), src, t.data.size() * 8);
    } else {
      std::vector<float> f(static_cast<std::size_t>(n));
      std::memcpy(f.data(), src, f.size() * 4);
      std::copy(f.begin(), f.end(), t.data.begin());
    }
    out.tensors[it.key()] = std::move(t);
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorFile& file) {
  json h = json::object();
  std::uint64_t offset = 0;
  // Data is laid out in header key order (std::map and json::object agree).
  std::map<std::string, std::pair<const void*, std::uint64_t>> chunks;
  for (const auto& [name, t] : file.tensors) {
    const std::uint64_t bytes = t.data.size() * 8;
    chunks[name] = {t.data.data(), bytes};
    h[name] = {{"dtype", "F64"}, {"shape", t.shape}, {"data_offsets", {0, 0}}};
  }
  for (const auto& [name, v] : file.int_tensors) {
    if (chunks.contains(name)) throw ContractError("duplicate tensor name " + name);
    chunks[name] = {v.data(), v.size() * 8};
    h[name] = {{"dtype", "I64"}, {"shape", {static_cast<std::int64_t>(v.size())}}, {"data_offsets", {0, 0}}};
  }
  for (auto& [name, chunk] : chunks) {
    h[name]["data_offsets"] = {offset, offset + chunk.second};
    offset += chunk.second;
  }
  if (!file.metadata.empty()) h["__metadata__"] = file.metadata;

  std::string header = h.dump();
  while (header.size() % 8 != 0) header.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, chunk] : chunks) {
    out.write(static_cast<const char*>(chunk.first), static_cast<std::streamsize>(chunk.second));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

}  // namespace siblurry
