#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "siblurry/scenario.hpp"
#include "siblurry/types.hpp"

namespace siblurry {

enum class DatasetName { cifar100, tiny_imagenet, imagenet_r };

DatasetName parse_dataset_name(std::string_view name);
std::string to_string(DatasetName name);
/// Human-readable description of the files expected under the dataset root.
std::string dataset_layout(DatasetName name);

/// Shape of one raw input. Vector data uses {1, 1, dim}.
struct InputShape {
  int channels = 1;
  int height = 1;
  int width = 1;

  Index size() const { return static_cast<Index>(channels) * height * width; }
  bool operator==(const InputShape&) const = default;
};

/// Produces the raw input for a sample id: pixels in [0, 1] laid out
/// [C, H, W], or a feature vector. Must be pure.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual Vector fetch(SampleId id) const = 0;
};

struct Sample {
  Vector input;
  ClassId label = 0;
};

/// Uniform view over a labelled dataset. Sample ids are dense: training ids
/// come first, then test ids.
struct DatasetIndex {
  std::string name;
  int num_classes = 0;
  InputShape shape;
  ClassSamples train;
  ClassSamples test;
  std::vector<ClassId> labels;  // label per sample id
  std::shared_ptr<const SampleSource> source;

  Sample fetch(SampleId id) const;
  /// One raw input per row.
  Matrix fetch_rows(std::span<const SampleId> ids) const;
  ClassId label_of(SampleId id) const;
  std::size_t train_size() const;
  std::size_t test_size() const;
  std::vector<SampleId> test_ids() const;

  /// Sample ids unique across splits; every class non-empty in both splits.
  void validate() const;
};

struct SyntheticSpec {
  int num_classes = 10;
  int dim = 64;
  int per_class = 100;
  /// Test samples per class; 0 selects max(1, per_class / 4).
  int test_per_class = 0;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

/// Gaussian blobs around class centres drawn uniformly from the unit sphere.
DatasetIndex make_synthetic(const SyntheticSpec& spec);
DatasetIndex make_synthetic(int num_classes, int dim, int per_class, double noise, std::uint64_t seed);

/// Loads one of the benchmark datasets from local files. No network access.
DatasetIndex load_dataset(DatasetName name, const std::filesystem::path& root);

/// Portable on-disk index: `index.json` plus `samples.bin` (float64,
/// row-major, one row per sample id).
void save_index(const DatasetIndex& index, const std::filesystem::path& dir);
DatasetIndex load_index(const std::filesystem::path& dir);

}  // namespace siblurry
