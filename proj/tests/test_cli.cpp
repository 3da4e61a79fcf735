#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "siblurry/cli.hpp"
#include "siblurry/error.hpp"
#include "support.hpp"

namespace siblurry {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

ExperimentConfig small_config(const fs::path& out, Method method = Method::linear_probe) {
  ExperimentConfig c;
  c.dataset.synthetic = SyntheticSpec{5, 64, 20, 0, 0.05, 0};
  c.train.method = method;
  c.train.pool_size = 4;
  c.output_dir = out.string();
  return c;
}

/// Linear interpolation clamped to the end points (independent of the library).
double interp(const std::vector<EvalPoint>& pts, double x) {
  if (x <= static_cast<double>(pts.front().samples_seen)) return pts.front().accuracy;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double x0 = static_cast<double>(pts[i - 1].samples_seen), x1 = static_cast<double>(pts[i].samples_seen);
    if (x <= x1) return pts[i - 1].accuracy + (pts[i].accuracy - pts[i - 1].accuracy) * (x - x0) / (x1 - x0);
  }
  return pts.back().accuracy;
}

TEST(Config, JsonRoundTripAndOverrides) {
  ExperimentConfig c = small_config("out");
  c.train.seeds = {3, 4};
  c.scenario.num_tasks = 4;
  const ExperimentConfig back = experiment_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());

  nlohmann::json j = to_json(c);
  apply_override(j, "train.lr=0.01");
  apply_override(j, "train.method=mvp");
  apply_override(j, "train.seeds=[1,2,3]");
  apply_override(j, "scenario.disjoint_class_ratio=0.25");
  const ExperimentConfig o = experiment_from_json(j);
  EXPECT_EQ(o.train.lr, 0.01);
  EXPECT_EQ(o.train.method, Method::mvp);
  EXPECT_EQ(o.train.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(o.scenario.disjoint_class_ratio, 0.25);
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);

  nlohmann::json bad = to_json(c);
  bad["unknown"] = 1;
  EXPECT_THROW(experiment_from_json(bad), ConfigError);
  bad = to_json(c);
  bad["dataset"]["path"] = "x";
  EXPECT_THROW(experiment_from_json(bad), ConfigError);
}

TEST(Config, LoadFileWithOverridesAndValidation) {
  test::TempDir dir;
  std::ofstream(dir / "c.json") << "{\n  // comment\n  \"train\": {\"batch_size\": 16},\n"
                                   "  \"scenario\": {\"batch_size\": 16}\n}\n";
  const ExperimentConfig c = load_experiment(dir / "c.json", {"workers=2"});
  EXPECT_EQ(c.train.batch_size, 16);
  EXPECT_EQ(c.workers, 2);
  c.validate();
  ExperimentConfig mismatch = c;
  mismatch.scenario.batch_size = 32;
  EXPECT_THROW(mismatch.validate(), ConfigError);
  EXPECT_THROW(load_experiment(dir / "missing.json"), ConfigError);
}

TEST(Config, DatasetRootFromEnvironment) {
  DatasetConfig d;
  d.name = "cifar100";
  ::unsetenv(kDataRootEnv);
  EXPECT_THROW(resolve_dataset(d), ConfigError);
  test::TempDir dir;
  ::setenv(kDataRootEnv, dir.path().c_str(), 1);
  EXPECT_THROW(resolve_dataset(d), IngestionError);  // root found, layout missing
  ::unsetenv(kDataRootEnv);
}

TEST(Generate, DeterministicBytes) {
  test::TempDir dir;
  const ExperimentConfig a = small_config(dir / "a");
  const ExperimentConfig b = small_config(dir / "b");
  const auto ra = cmd_generate(a);
  const auto rb = cmd_generate(b);
  EXPECT_EQ(slurp(ra.manifest_path), slurp(rb.manifest_path));
  EXPECT_EQ(slurp(dir / "a" / "stats.txt"), slurp(dir / "b" / "stats.txt"));
  const StreamManifest m = read_manifest(ra.manifest_path);
  EXPECT_EQ(m.entries.size(), 100u);
  EXPECT_EQ(m.num_tasks(), 5u);
  // The saved synthetic index resolves the manifest's sample ids.
  const DatasetIndex idx = load_index(dir / "a" / "index");
  for (const auto& e : m.entries) EXPECT_EQ(idx.label_of(e.sample_id), e.class_id);
}

TEST(Generate, UnwritableOutputIsIoError) {
  test::TempDir dir;
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(cmd_generate(small_config(dir / "file" / "sub")), IoError);
}

TEST(Run, SingleSeedSummary) {
  test::TempDir dir;
  const RunSummary s = cmd_run(small_config(dir / "run"));
  ASSERT_FALSE(s.failed);
  ASSERT_EQ(s.seeds.size(), 1u);
  EXPECT_EQ(s.a_last.std, 0.0);
  EXPECT_EQ(s.a_last.n, 1u);
  const auto summary = nlohmann::json::parse(slurp(s.summary_path));
  EXPECT_EQ(summary.at("status"), "ok");
  EXPECT_EQ(summary.at("a_last").at("std"), 0.0);
  EXPECT_DOUBLE_EQ(summary.at("a_last").at("mean").get<double>(), s.seeds[0].a_last);
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
  const RunRecord r = read_record(s.seeds[0].record_path);
  EXPECT_DOUBLE_EQ(a_last(r), s.seeds[0].a_last);
  const ExperimentConfig effective = experiment_from_json(nlohmann::json::parse(slurp(dir / "run" / "config.json")));
  EXPECT_EQ(effective.backbone.input.width, 64);
}

TEST(Run, MultipleSeedsParallelMatchesSequential) {
  test::TempDir dir;
  ExperimentConfig seq = small_config(dir / "seq");
  seq.train.seeds = {1, 2, 3};
  ExperimentConfig par = seq;
  par.output_dir = (dir / "par").string();
  par.workers = 3;
  const RunSummary a = cmd_run(seq);
  const RunSummary b = cmd_run(par);
  ASSERT_EQ(a.seeds.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(fs::exists(a.seeds[i].record_path));
    EXPECT_EQ(a.seeds[i].a_last, b.seeds[i].a_last);
    EXPECT_EQ(a.seeds[i].a_auc, b.seeds[i].a_auc);
  }
  EXPECT_EQ(slurp(a.summary_path), slurp(b.summary_path));
}

TEST(Run, FailedSeedMarksSummaryAndKeepsRecord) {
  test::TempDir dir;
  ExperimentConfig c = small_config(dir / "run", Method::mvp);
  c.train.lr = 1e300;  // overflows into a non-finite loss after the first step
  const RunSummary s = cmd_run(c);
  EXPECT_TRUE(s.failed);
  const auto summary = nlohmann::json::parse(slurp(s.summary_path));
  EXPECT_EQ(summary.at("status"), "failed");
  const RunRecord r = read_record(s.seeds[0].record_path);
  EXPECT_FALSE(r.completed);
  EXPECT_NE(r.error.find("sample_ids"), std::string::npos);
}

TEST(Plot, CsvRowsAndMeanBand) {
  test::TempDir dir;
  ExperimentConfig c = small_config(dir / "run");
  c.train.seeds = {1, 2};
  c.train.eval_period = 32;
  const RunSummary s = cmd_run(c);
  const RunRecord r1 = read_record(s.seeds[0].record_path);

  const PlotResult one = cmd_plot({s.seeds[0].record_path}, dir / "one");
  EXPECT_FALSE(one.resampled);
  const auto rows = read_csv(dir / "one" / "accuracy_curve.csv");
  EXPECT_EQ(rows.size(), r1.eval_points.size() + 1);
  EXPECT_EQ(read_csv(dir / "one" / "loss_trace.csv").size(), r1.loss_trace.size() + 1);
  EXPECT_TRUE(fs::exists(dir / "one" / "accuracy_curve.svg"));

  // A second run with a different grid forces resampling onto the union grid.
  ExperimentConfig c2 = small_config(dir / "run2");
  c2.train.seeds = {7};
  c2.train.eval_period = 48;
  const RunSummary s2 = cmd_run(c2);
  const RunRecord r2 = read_record(s2.seeds[0].record_path);
  const PlotResult both = cmd_plot({s.seeds[0].record_path, s2.seeds[0].record_path}, dir / "both");
  EXPECT_TRUE(both.resampled);
  const auto table = read_csv(dir / "both" / "accuracy_curve.csv");
  ASSERT_EQ(table[0], (std::vector<std::string>{"samples_seen", "seed_1", "seed_7", "mean", "std"}));
  for (std::size_t i = 1; i < table.size(); ++i) {
    const double x = std::stod(table[i][0]);
    const double a = interp(r1.eval_points, x), b = interp(r2.eval_points, x);
    EXPECT_NEAR(std::stod(table[i][3]), 0.5 * (a + b), 1e-12);
    EXPECT_NEAR(std::stod(table[i][4]), std::abs(a - b) / std::sqrt(2.0), 1e-12);
  }
  EXPECT_THROW(cmd_plot({}, dir / "none"), ConfigError);
}

TEST(ExportPool, FreshPoolAndRunCounts) {
  test::TempDir dir;
  const auto backbone = std::make_shared<const Backbone>(Backbone::random(BackboneSpec::toy(), 0));
  TrainConfig t;
  t.pool_size = 10;
  const ModelState fresh = ModelState::create(backbone, 6, t, 1);
  save_checkpoint(fresh, dir / "fresh.safetensors");
  cmd_export_pool(dir / "fresh.safetensors", dir / "fresh");
  const auto keys = read_csv(dir / "fresh" / "keys.csv");
  ASSERT_EQ(keys.size(), 10u);
  EXPECT_EQ(keys[0].size(), 64u);
  for (const auto& row : read_csv(dir / "fresh" / "masks.csv")) {
    ASSERT_EQ(row.size(), 6u);
    for (const auto& v : row) EXPECT_EQ(std::stod(v), 1.0);
  }

  ExperimentConfig c = small_config(dir / "run", Method::mvp);
  const RunSummary s = cmd_run(c);
  ASSERT_FALSE(s.failed);
  const RunRecord r = read_record(s.seeds[0].record_path);
  const fs::path ck = dir / "run" / "checkpoints" / "seed1_final.safetensors";
  ASSERT_TRUE(fs::exists(ck));
  cmd_export_pool(ck, dir / "pool");
  std::int64_t total = 0;
  for (const auto& row : read_csv(dir / "pool" / "counts.csv")) total += std::stoll(row.at(0));
  EXPECT_EQ(total, r.total_selections);
  EXPECT_EQ(total, 100);

  std::ofstream(dir / "junk.safetensors") << "not a checkpoint";
  EXPECT_THROW(cmd_export_pool(dir / "junk.safetensors", dir / "junk"), LoadError);
}

TEST(DownloadData, DryRunListsCommands) {
  test::TempDir dir;
  std::ostringstream log;
  EXPECT_EQ(cmd_download_data(DatasetName::cifar100, dir.path(), true, log), 0);
  EXPECT_NE(log.str().find("cifar-100-binary.tar.gz"), std::string::npos);
  for (auto name : {DatasetName::cifar100, DatasetName::tiny_imagenet, DatasetName::imagenet_r}) {
    EXPECT_FALSE(download_commands(name, dir.path()).empty());
  }
}

TEST(ErrorRecord, MachineReadable) {
  const auto j = nlohmann::json::parse(error_record(ConfigError("bad value")));
  EXPECT_EQ(j.at("error").at("kind"), "config");
  EXPECT_NE(j.at("error").at("message").get<std::string>().find("bad value"), std::string::npos);
}

#ifdef SIBLURRY_EXE
TEST(Executable, ExitCodesAndErrorRecord) {
  test::TempDir dir;
  const std::string exe = SIBLURRY_EXE;
  const std::string ok = fmt::format(
      "{} generate -s dataset.synthetic.num_classes=5 -s dataset.synthetic.per_class=20 -s output_dir={} > {} 2>&1",
      exe, (dir / "gen").string(), (dir / "log").string());
  EXPECT_EQ(std::system(ok.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "gen" / "manifest.jsonl"));

  const std::string bad =
      fmt::format("{} run -s train.alpha=3 -s output_dir={} 2> {}", exe, (dir / "x").string(), (dir / "err").string());
  EXPECT_NE(std::system(bad.c_str()), 0);
  std::istringstream err(slurp(dir / "err"));
  std::string line, last;
  while (std::getline(err, line)) {
    if (!line.empty() && line.front() == '{') last = line;
  }
  ASSERT_FALSE(last.empty());
  EXPECT_EQ(nlohmann::json::parse(last).at("error").at("kind"), "config");
}
#endif

}  // namespace
}  // namespace siblurry
