#include "siblurry/scenario.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "siblurry/error.hpp"

namespace siblurry {

using ojson = nlohmann::ordered_json;

void ScenarioConfig::validate() const {
  if (num_tasks < 1) throw ConfigError("scenario.num_tasks must be >= 1");
  if (!(disjoint_class_ratio >= 0.0 && disjoint_class_ratio <= 1.0)) {
    throw ConfigError("scenario.disjoint_class_ratio must lie in [0, 1]");
  }
  if (!(blurry_sample_ratio >= 0.0 && blurry_sample_ratio <= 1.0)) {
    throw ConfigError("scenario.blurry_sample_ratio must lie in [0, 1]");
  }
  if (batch_size < 1) throw ConfigError("scenario.batch_size must be >= 1");
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

ClassPartition partition_classes(std::vector<ClassId> class_ids, double disjoint_ratio, Rng& rng) {
  if (class_ids.empty()) throw ConfigError("partition_classes: empty class set");
  if (!(disjoint_ratio >= 0.0 && disjoint_ratio <= 1.0)) {
    throw ConfigError("partition_classes: ratio must lie in [0, 1]");
  }
  std::sort(class_ids.begin(), class_ids.end());
  if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end()) {
    throw ConfigError("partition_classes: duplicate class id");
  }
  const std::size_t n_disjoint = round_half_up(disjoint_ratio * static_cast<double>(class_ids.size()));
  rng.shuffle(class_ids.begin(), class_ids.end());
  ClassPartition p;
  p.disjoint_classes.assign(class_ids.begin(), class_ids.begin() + static_cast<std::ptrdiff_t>(n_disjoint));
  p.blurry_classes.assign(class_ids.begin() + static_cast<std::ptrdiff_t>(n_disjoint), class_ids.end());
  std::sort(p.disjoint_classes.begin(), p.disjoint_classes.end());
  std::sort(p.blurry_classes.begin(), p.blurry_classes.end());
  return p;
}

TaskAssignment assign_classes_to_tasks(const ClassPartition& partition, int num_tasks, Rng& rng,
                                       bool balanced) {
  if (num_tasks < 1) throw ConfigError("assign_classes_to_tasks: num_tasks must be >= 1");
  ClassId max_id = -1;
  for (ClassId c : partition.disjoint_classes) max_id = std::max(max_id, c);
  for (ClassId c : partition.blurry_classes) max_id = std::max(max_id, c);

  TaskAssignment a;
  a.class_to_task.assign(static_cast<std::size_t>(max_id + 1), -1);
  a.per_task_classes.resize(static_cast<std::size_t>(num_tasks));
  const auto T = static_cast<std::uint64_t>(num_tasks);

  auto assign_group = [&](std::vector<ClassId> group) {
    if (balanced) {
      rng.shuffle(group.begin(), group.end());
      for (std::size_t k = 0; k < group.size(); ++k) {
        a.class_to_task[static_cast<std::size_t>(group[k])] = static_cast<int>(k % T);
      }
    } else {
      for (ClassId c : group) a.class_to_task[static_cast<std::size_t>(c)] = static_cast<int>(rng.uniform_index(T));
    }
  };
  assign_group(partition.disjoint_classes);
  assign_group(partition.blurry_classes);

  for (std::size_t c = 0; c < a.class_to_task.size(); ++c) {
    if (a.class_to_task[c] >= 0) {
      a.per_task_classes[static_cast<std::size_t>(a.class_to_task[c])].push_back(static_cast<ClassId>(c));
    }
  }
  return a;
}

StreamManifest distribute_blurry_samples(const ClassSamples& index, const ClassPartition& partition,
                                         const TaskAssignment& assignment, double blurry_ratio, Rng& rng,
                                         bool leak_excludes_home) {
  const auto T = static_cast<int>(assignment.per_task_classes.size());
  if (T < 1) throw ConfigError("distribute_blurry_samples: assignment has no tasks");
  auto samples_of = [&](ClassId c) -> const std::vector<SampleId>& {
    if (c < 0 || static_cast<std::size_t>(c) >= index.size()) {
      throw ConfigError(fmt::format("class {} missing from dataset index", c));
    }
    return index[static_cast<std::size_t>(c)];
  };
  auto home_of = [&](ClassId c) {
    if (static_cast<std::size_t>(c) >= assignment.class_to_task.size() || assignment.home_task(c) < 0) {
      throw ConfigError(fmt::format("class {} has no home task", c));
    }
    return assignment.home_task(c);
  };

  std::vector<std::vector<StreamEntry>> tasks(static_cast<std::size_t>(T));
  StreamManifest m;
  m.partition = partition;
  m.assignment = assignment;

  for (ClassId c : partition.disjoint_classes) {
    const int home = home_of(c);
    for (SampleId id : samples_of(c)) tasks[static_cast<std::size_t>(home)].push_back({id, c, home});
  }

  for (ClassId c : partition.blurry_classes) {
    const int home = home_of(c);
    std::vector<SampleId> ids = samples_of(c);
    if (ids.empty()) {
      spdlog::warn("blurry class {} has no samples; skipped", c);
      continue;
    }
    const std::size_t n_pool = std::min(ids.size(), round_half_up(blurry_ratio * static_cast<double>(ids.size())));
    rng.shuffle(ids.begin(), ids.end());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      int task = home;
      if (k < n_pool) {
        m.pooled_samples.push_back(ids[k]);
        if (leak_excludes_home && T > 1) {
          task = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(T - 1)));
          if (task >= home) ++task;
        } else {
          task = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(T)));
        }
      }
      tasks[static_cast<std::size_t>(task)].push_back({ids[k], c, task});
    }
  }
  std::sort(m.pooled_samples.begin(), m.pooled_samples.end());

  // Canonical order before shuffling so the result does not depend on the
  // class iteration order above.
  const Rng shuffle_base = rng.split("shuffle");
  for (int t = 0; t < T; ++t) {
    auto& entries = tasks[static_cast<std::size_t>(t)];
    std::sort(entries.begin(), entries.end(),
              [](const StreamEntry& a, const StreamEntry& b) { return a.sample_id < b.sample_id; });
    Rng task_rng = shuffle_base.split(static_cast<std::uint64_t>(t));
    task_rng.shuffle(entries.begin(), entries.end());
    m.task_boundaries.push_back(m.entries.size());
    m.entries.insert(m.entries.end(), entries.begin(), entries.end());
  }
  return m;
}

StreamManifest generate_stream(const ClassSamples& index, const ScenarioConfig& config,
                               const std::string& dataset_name) {
  config.validate();
  std::vector<ClassId> classes;
  for (std::size_t c = 0; c < index.size(); ++c) classes.push_back(static_cast<ClassId>(c));
  const Rng root(config.seed);
  Rng partition_rng = root.split("partition");
  Rng assignment_rng = root.split("assignment");
  Rng leakage_rng = root.split("leakage");

  const ClassPartition partition = partition_classes(classes, config.disjoint_class_ratio, partition_rng);
  const TaskAssignment assignment =
      assign_classes_to_tasks(partition, config.num_tasks, assignment_rng, config.balanced_assignment);
  StreamManifest m = distribute_blurry_samples(index, partition, assignment, config.blurry_sample_ratio,
                                               leakage_rng, config.leak_excludes_home);
  m.config = config;
  m.dataset = dataset_name;
  return m;
}

BatchView::BatchView(std::span<const StreamEntry> entries, std::size_t batch_size)
    : entries_(entries), batch_size_(batch_size) {
  if (batch_size_ == 0) throw ContractError("iterate_stream: batch_size must be >= 1");
}

BatchView iterate_stream(const StreamManifest& manifest, std::size_t batch_size) {
  return BatchView(manifest.entries, batch_size);
}

std::vector<TaskStats> task_stats(const StreamManifest& manifest) {
  std::vector<TaskStats> stats(manifest.num_tasks());
  std::vector<std::vector<bool>> seen(manifest.num_tasks());
  for (std::size_t t = 0; t < stats.size(); ++t) stats[t].task = static_cast<int>(t);
  for (ClassId c : manifest.partition.disjoint_classes) {
    stats[static_cast<std::size_t>(manifest.assignment.home_task(c))].disjoint_classes++;
  }
  for (ClassId c : manifest.partition.blurry_classes) {
    stats[static_cast<std::size_t>(manifest.assignment.home_task(c))].blurry_classes++;
  }
  for (const auto& e : manifest.entries) {
    auto& s = stats[static_cast<std::size_t>(e.task_index)];
    auto& classes = seen[static_cast<std::size_t>(e.task_index)];
    if (classes.size() <= static_cast<std::size_t>(e.class_id)) classes.resize(static_cast<std::size_t>(e.class_id) + 1);
    if (!classes[static_cast<std::size_t>(e.class_id)]) {
      classes[static_cast<std::size_t>(e.class_id)] = true;
      s.num_classes++;
    }
    s.num_samples++;
    if (manifest.assignment.home_task(e.class_id) != e.task_index) s.leaked_in++;
  }
  return stats;
}

std::string format_stats(const StreamManifest& manifest) {
  std::string out = fmt::format("{:>4} {:>8} {:>8} {:>9} {:>7} {:>10}\n", "task", "classes", "samples",
                                "disjoint", "blurry", "leaked_in");
  for (const auto& s : task_stats(manifest)) {
    out += fmt::format("{:>4} {:>8} {:>8} {:>9} {:>7} {:>10}\n", s.task, s.num_classes, s.num_samples,
                       s.disjoint_classes, s.blurry_classes, s.leaked_in);
  }
  return out;
}

// ----------------------------------------------------------------- I/O

namespace {

ojson config_to_json(const ScenarioConfig& c) {
  ojson j;
  j["num_tasks"] = c.num_tasks;
  j["disjoint_class_ratio"] = c.disjoint_class_ratio;
  j["blurry_sample_ratio"] = c.blurry_sample_ratio;
  j["seed"] = c.seed;
  j["batch_size"] = c.batch_size;
  j["leak_excludes_home"] = c.leak_excludes_home;
  j["balanced_assignment"] = c.balanced_assignment;
  return j;
}

ScenarioConfig config_from_json(const ojson& j) {
  ScenarioConfig c;
  c.num_tasks = j.at("num_tasks").get<int>();
  c.disjoint_class_ratio = j.at("disjoint_class_ratio").get<double>();
  c.blurry_sample_ratio = j.at("blurry_sample_ratio").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.batch_size = j.at("batch_size").get<int>();
  c.leak_excludes_home = j.value("leak_excludes_home", false);
  c.balanced_assignment = j.value("balanced_assignment", false);
  return c;
}

}  // namespace

void write_manifest(std::ostream& out, const StreamManifest& m) {
  ojson header;
  header["type"] = "header";
  header["dataset"] = m.dataset;
  header["config"] = config_to_json(m.config);
  header["partition"] = {{"disjoint", m.partition.disjoint_classes}, {"blurry", m.partition.blurry_classes}};
  header["class_to_task"] = m.assignment.class_to_task;
  header["task_boundaries"] = m.task_boundaries;
  header["num_entries"] = m.entries.size();
  header["pooled_samples"] = m.pooled_samples;
  out << header.dump() << '\n';
  for (const auto& e : m.entries) {
    out << fmt::format("{{\"sample_id\":{},\"class_id\":{},\"task_index\":{}}}\n", e.sample_id, e.class_id,
                       e.task_index);
  }
}

void write_manifest(const std::filesystem::path& path, const StreamManifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  write_manifest(out, m);
  if (!out) throw IoError("failed writing manifest " + path.string());
}

StreamManifest read_manifest(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw LoadError("manifest is empty");
  StreamManifest m;
  try {
    const auto h = ojson::parse(line);
    if (h.at("type") != "header") throw LoadError("manifest does not start with a header record");
    m.dataset = h.at("dataset").get<std::string>();
    m.config = config_from_json(h.at("config"));
    m.partition.disjoint_classes = h.at("partition").at("disjoint").get<std::vector<ClassId>>();
    m.partition.blurry_classes = h.at("partition").at("blurry").get<std::vector<ClassId>>();
    m.assignment.class_to_task = h.at("class_to_task").get<std::vector<int>>();
    m.assignment.per_task_classes.resize(static_cast<std::size_t>(m.config.num_tasks));
    for (std::size_t c = 0; c < m.assignment.class_to_task.size(); ++c) {
      const int t = m.assignment.class_to_task[c];
      if (t >= m.config.num_tasks) throw LoadError("manifest assigns a class to an unknown task");
      if (t >= 0) m.assignment.per_task_classes[static_cast<std::size_t>(t)].push_back(static_cast<ClassId>(c));
    }
    m.task_boundaries = h.at("task_boundaries").get<std::vector<std::size_t>>();
    m.pooled_samples = h.at("pooled_samples").get<std::vector<SampleId>>();
    const auto n = h.at("num_entries").get<std::size_t>();
    m.entries.reserve(n);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto e = ojson::parse(line);
      m.entries.push_back({e.at("sample_id").get<SampleId>(), e.at("class_id").get<ClassId>(),
                           e.at("task_index").get<int>()});
    }
    if (m.entries.size() != n) throw LoadError("manifest entry count does not match its header");
  } catch (const ojson::exception& e) {
    throw LoadError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

StreamManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  return read_manifest(in);
}

}  // namespace siblurry
