#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "siblurry/backbone.hpp"
#include "siblurry/datasets.hpp"
#include "siblurry/engine.hpp"
#include "siblurry/metrics.hpp"
#include "siblurry/scenario.hpp"

namespace siblurry {

/// Environment variable consulted when dataset.root is empty.
inline constexpr const char* kDataRootEnv = "SIBLURRY_DATA_ROOT";

struct DatasetConfig {
  /// synthetic | cifar100 | tiny_imagenet | imagenet_r | index
  std::string name = "synthetic";
  /// Dataset root, or the directory of a saved index for name == "index".
  std::string root;
  SyntheticSpec synthetic;
};

struct ExperimentConfig {
  ScenarioConfig scenario;
  TrainConfig train;
  DatasetConfig dataset;
  BackboneSpec backbone = BackboneSpec::toy();
  std::uint64_t backbone_seed = 0;
  std::string output_dir = "runs";
  /// Existing manifest used for every seed; empty generates one per seed.
  std::string manifest;
  int workers = 1;

  void validate() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
/// Applies "a.b.c=value"; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

DatasetIndex resolve_dataset(const DatasetConfig& config);
/// The toy profile adopts the dataset's input shape.
BackboneSpec resolve_backbone(const ExperimentConfig& config, const DatasetIndex& dataset);

struct GenerateResult {
  std::filesystem::path manifest_path;
  std::string stats;
};
GenerateResult cmd_generate(const ExperimentConfig& config);

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::filesystem::path record_path;
  bool ok = false;
  std::string error;
  double a_auc = 0.0;
  double a_last = 0.0;
  double forgetting = 0.0;
};

struct RunSummary {
  std::vector<SeedOutcome> seeds;
  Aggregate a_auc;
  Aggregate a_last;
  Aggregate forgetting;
  bool failed = false;
  std::filesystem::path summary_path;
};
RunSummary cmd_run(const ExperimentConfig& config);

struct PlotResult {
  std::vector<std::filesystem::path> files;
  /// Set when eval grids differed and curves were resampled.
  bool resampled = false;
};
PlotResult cmd_plot(const std::vector<std::filesystem::path>& records, const std::filesystem::path& out_dir);

/// Writes keys.csv, masks.csv and counts.csv.
std::vector<std::filesystem::path> cmd_export_pool(const std::filesystem::path& checkpoint,
                                                   const std::filesystem::path& out_dir);

/// Shell commands that fetch and unpack a dataset under `root`.
std::vector<std::string> download_commands(DatasetName name, const std::filesystem::path& root);
int cmd_download_data(DatasetName name, const std::filesystem::path& root, bool dry_run, std::ostream& log);

/// Machine-readable error record for the CLI's stderr.
std::string error_record(const std::exception& e);

}  // namespace siblurry
