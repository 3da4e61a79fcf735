#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "siblurry/rng.hpp"
#include "siblurry/types.hpp"

namespace siblurry {

struct ReplayItem {
  SampleId sample_id = 0;
  ClassId class_id = 0;

  bool operator==(const ReplayItem&) const = default;
};

struct ReplayBuffer {
  std::size_t capacity = 0;
  std::vector<ReplayItem> items;
  std::size_t seen = 0;

  explicit ReplayBuffer(std::size_t capacity_ = 0) : capacity(capacity_) {}
  bool operator==(const ReplayBuffer&) const = default;
};

/// Reservoir sampling: every streamed item ends up in the buffer with
/// probability capacity / seen.
void reservoir_update(ReplayBuffer& buffer, const ReplayItem& item, Rng& rng);

/// Stream items followed by min(|stream|, |buffer|) buffer items drawn
/// without replacement.
std::vector<ReplayItem> compose_batch(std::span<const ReplayItem> stream, const ReplayBuffer& buffer, Rng& rng);

/// Same line format as stream manifests, with task_index -1.
void dump_buffer(const ReplayBuffer& buffer, const std::filesystem::path& path);
ReplayBuffer load_buffer(const std::filesystem::path& path);

}  // namespace siblurry
