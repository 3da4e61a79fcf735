#pragma once

// Si-Blurry stream construction.
//
// Classes are split into disjoint classes (every sample stays in the class's
// home task) and blurry classes (a fixed fraction of each class's samples is
// pooled and scattered over tasks). Home tasks are drawn independently per
// class, so the number of classes per task varies from seed to seed.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "siblurry/rng.hpp"
#include "siblurry/types.hpp"

namespace siblurry {

/// Training samples grouped by class: class_samples[c] lists class c's ids.
using ClassSamples = std::vector<std::vector<SampleId>>;

struct ScenarioConfig {
  int num_tasks = 5;
  double disjoint_class_ratio = 0.5;
  double blurry_sample_ratio = 0.1;
  std::uint64_t seed = 0;
  int batch_size = 32;
  /// Pooled blurry samples never return to their home task (when T > 1).
  bool leak_excludes_home = false;
  /// i-Blurry style: deal classes round-robin so task class counts are equal.
  bool balanced_assignment = false;

  void validate() const;
  bool operator==(const ScenarioConfig&) const = default;
};

struct ClassPartition {
  std::vector<ClassId> disjoint_classes;  // sorted
  std::vector<ClassId> blurry_classes;    // sorted

  bool operator==(const ClassPartition&) const = default;
};

struct TaskAssignment {
  /// Home task per class id; -1 for ids not in the partition.
  std::vector<int> class_to_task;
  std::vector<std::vector<ClassId>> per_task_classes;

  int home_task(ClassId c) const { return class_to_task.at(static_cast<std::size_t>(c)); }
  bool operator==(const TaskAssignment&) const = default;
};

struct StreamEntry {
  SampleId sample_id = 0;
  ClassId class_id = 0;
  int task_index = 0;

  bool operator==(const StreamEntry&) const = default;
};

struct StreamManifest {
  std::string dataset;
  ScenarioConfig config;
  ClassPartition partition;
  TaskAssignment assignment;
  std::vector<StreamEntry> entries;
  /// Offset into `entries` where each task begins.
  std::vector<std::size_t> task_boundaries;
  /// Ids of blurry samples that were pooled for redistribution (sorted).
  std::vector<SampleId> pooled_samples;

  std::size_t num_tasks() const { return task_boundaries.size(); }
  bool operator==(const StreamManifest&) const = default;
};

/// Rounds half away from zero on nonnegative inputs.
std::size_t round_half_up(double x);

ClassPartition partition_classes(std::vector<ClassId> class_ids, double disjoint_ratio, Rng& rng);

TaskAssignment assign_classes_to_tasks(const ClassPartition& partition, int num_tasks, Rng& rng,
                                       bool balanced = false);

StreamManifest distribute_blurry_samples(const ClassSamples& index, const ClassPartition& partition,
                                         const TaskAssignment& assignment, double blurry_ratio, Rng& rng,
                                         bool leak_excludes_home = false);

/// Full pipeline: partition, assignment, leakage and intra-task shuffling,
/// each on its own named sub-stream of Rng(config.seed).
StreamManifest generate_stream(const ClassSamples& index, const ScenarioConfig& config,
                               const std::string& dataset_name = "");

/// Consecutive slices of a manifest's entries. The last batch may be short.
class BatchView {
 public:
  class iterator {
   public:
    using value_type = std::span<const StreamEntry>;
    using difference_type = std::ptrdiff_t;

    iterator() = default;
    iterator(std::span<const StreamEntry> all, std::size_t pos, std::size_t size)
        : all_(all), pos_(pos), size_(size) {}

    value_type operator*() const { return all_.subspan(pos_, std::min(size_, all_.size() - pos_)); }
    iterator& operator++() {
      pos_ = std::min(all_.size(), pos_ + size_);
      return *this;
    }
    iterator operator++(int) {
      auto tmp = *this;
      ++*this;
      return tmp;
    }
    bool operator==(const iterator& o) const { return pos_ == o.pos_; }

   private:
    std::span<const StreamEntry> all_;
    std::size_t pos_ = 0;
    std::size_t size_ = 1;
  };

  BatchView(std::span<const StreamEntry> entries, std::size_t batch_size);

  iterator begin() const { return {entries_, 0, batch_size_}; }
  iterator end() const { return {entries_, entries_.size(), batch_size_}; }
  std::size_t size() const { return (entries_.size() + batch_size_ - 1) / batch_size_; }

 private:
  std::span<const StreamEntry> entries_;
  std::size_t batch_size_;
};

BatchView iterate_stream(const StreamManifest& manifest, std::size_t batch_size);

struct TaskStats {
  int task = 0;
  std::size_t num_classes = 0;
  std::size_t num_samples = 0;
  std::size_t disjoint_classes = 0;  // home-task disjoint classes
  std::size_t blurry_classes = 0;    // home-task blurry classes
  std::size_t leaked_in = 0;         // samples whose class has another home task
};

std::vector<TaskStats> task_stats(const StreamManifest& manifest);
std::string format_stats(const StreamManifest& manifest);

// Line-delimited JSON: a header record, then one record per entry.
void write_manifest(std::ostream& out, const StreamManifest& manifest);
void write_manifest(const std::filesystem::path& path, const StreamManifest& manifest);
StreamManifest read_manifest(std::istream& in);
StreamManifest read_manifest(const std::filesystem::path& path);

}  // namespace siblurry
