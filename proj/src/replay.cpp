#include "siblurry/replay.hpp"

#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "siblurry/error.hpp"

namespace siblurry {

void reservoir_update(ReplayBuffer& buffer, const ReplayItem& item, Rng& rng) {
  if (buffer.items.size() < buffer.capacity) {
    buffer.items.push_back(item);
  } else if (buffer.capacity > 0) {
    const auto j = rng.uniform_index(buffer.seen + 1);
    if (j < buffer.capacity) buffer.items[j] = item;
  }
  ++buffer.seen;
}

std::vector<ReplayItem> compose_batch(std::span<const ReplayItem> stream, const ReplayBuffer& buffer, Rng& rng) {
  std::vector<ReplayItem> out(stream.begin(), stream.end());
  const std::size_t k = std::min(stream.size(), buffer.items.size());
  if (k == 0) return out;
  // Partial Fisher-Yates over slot indices.
  std::vector<std::size_t> slots(buffer.items.size());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + rng.uniform_index(slots.size() - i);
    std::swap(slots[i], slots[j]);
    out.push_back(buffer.items[slots[i]]);
  }
  return out;
}

void dump_buffer(const ReplayBuffer& buffer, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::ordered_json header;
  header["type"] = "replay_buffer";
  header["capacity"] = buffer.capacity;
  header["seen"] = buffer.seen;
  header["num_entries"] = buffer.items.size();
  out << header.dump() << '\n';
  for (const auto& it : buffer.items) {
    out << fmt::format("{{\"sample_id\":{},\"class_id\":{},\"task_index\":-1}}\n", it.sample_id, it.class_id);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ReplayBuffer load_buffer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    std::string line;
    std::getline(in, line);
    const auto header = nlohmann::json::parse(line);
    if (header.at("type") != "replay_buffer") throw LoadError(path.string() + " is not a replay buffer dump");
    ReplayBuffer b(header.at("capacity").get<std::size_t>());
    b.seen = header.at("seen").get<std::size_t>();
    const auto n = header.at("num_entries").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      b.items.push_back({j.at("sample_id").get<SampleId>(), j.at("class_id").get<ClassId>()});
    }
    if (b.items.size() != n || n > b.capacity) throw LoadError(path.string() + ": entry count mismatch");
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace siblurry
