#include "siblurry/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "siblurry/config.hpp"
#include "siblurry/error.hpp"

namespace fs = std::filesystem;

namespace siblurry {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError(fmt::format("cannot create output directory {}", dir.string()));
  const fs::path probe = dir / ".write_probe";
  std::ofstream out(probe);
  if (!out) throw IoError(fmt::format("output directory {} is not writable", dir.string()));
  out.close();
  fs::remove(probe, ec);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

json aggregate_json(const Aggregate& a) {
  return json{{"mean", a.mean}, {"std", a.std}, {"n", a.n}, {"percent", format_percent(a)}};
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Line chart; `band` (lower, upper) is drawn as a shaded polygon over `band_x`.
std::string render_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                       const std::vector<Series>& series, const std::vector<double>& band_x = {},
                       const std::vector<double>& band_lo = {}, const std::vector<double>& band_hi = {}) {
  constexpr double W = 720, H = 440, L = 70, R = 20, T = 40, B = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  auto extend = [&](double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y)) return;
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  };
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) extend(s.x[i], s.y[i]);
  }
  for (std::size_t i = 0; i < band_x.size(); ++i) {
    extend(band_x[i], band_lo[i]);
    extend(band_x[i], band_hi[i]);
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  svg += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", W / 2,
                     escape_xml(title));
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{:.4g}</text>\n", px(xv), H - B + 18, xv);
    svg += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", L - 6, py(yv) + 4, yv);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (L + W - R) / 2, H - 18,
                     escape_xml(xlabel));
  svg += fmt::format("<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
                     (T + H - B) / 2, (T + H - B) / 2, escape_xml(ylabel));
  if (!band_x.empty()) {
    std::string pts;
    for (std::size_t i = 0; i < band_x.size(); ++i) pts += fmt::format("{:.2f},{:.2f} ", px(band_x[i]), py(band_hi[i]));
    for (std::size_t i = band_x.size(); i-- > 0;) pts += fmt::format("{:.2f},{:.2f} ", px(band_x[i]), py(band_lo[i]));
    svg += fmt::format("<polygon points=\"{}\" fill=\"#888888\" fill-opacity=\"0.25\" stroke=\"none\"/>\n", pts);
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::string pts;
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      if (std::isfinite(series[s].y[i])) pts += fmt::format("{:.2f},{:.2f} ", px(series[s].x[i]), py(series[s].y[i]));
    }
    const char* color = colors[s % std::size(colors)];
    svg += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n", pts, color);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n", W - R - 120, T + 14 * (s + 1), color,
                       escape_xml(series[s].name));
  }
  svg += "</svg>\n";
  return svg;
}

std::string csv_number(double v) { return std::isfinite(v) ? fmt::format("{:.17g}", v) : std::string(); }

}  // namespace

void ExperimentConfig::validate() const {
  scenario.validate();
  train.validate();
  if (scenario.batch_size != train.batch_size) {
    throw ConfigError("scenario.batch_size and train.batch_size must agree");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (!manifest.empty() && !fs::exists(manifest)) throw ConfigError("manifest " + manifest + " does not exist");
  if (!backbone.pretrained.empty() && !fs::exists(backbone.pretrained)) {
    throw ConfigError("pretrained checkpoint " + backbone.pretrained + " does not exist");
  }
}

ojson to_json(const ExperimentConfig& c) {
  ojson j;
  j["scenario"] = json(c.scenario);
  j["train"] = json(c.train);
  j["dataset"] = {{"name", c.dataset.name}, {"root", c.dataset.root}, {"synthetic", json(c.dataset.synthetic)}};
  j["backbone"] = json(c.backbone);
  j["backbone_seed"] = c.backbone_seed;
  j["output_dir"] = c.output_dir;
  j["manifest"] = c.manifest;
  j["workers"] = c.workers;
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"scenario", "train",       "dataset",  "backbone",
                                           "backbone_seed", "output_dir", "manifest", "workers"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError(fmt::format("unknown config key '{}'", it.key()));
  }
  ExperimentConfig c;
  try {
    if (j.contains("scenario")) c.scenario = j.at("scenario").get<ScenarioConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      for (auto it = d.begin(); it != d.end(); ++it) {
        if (it.key() != "name" && it.key() != "root" && it.key() != "synthetic") {
          throw ConfigError(fmt::format("dataset: unknown key '{}'", it.key()));
        }
      }
      if (d.contains("name")) c.dataset.name = d.at("name").get<std::string>();
      if (d.contains("root")) c.dataset.root = d.at("root").get<std::string>();
      if (d.contains("synthetic")) c.dataset.synthetic = d.at("synthetic").get<SyntheticSpec>();
    }
    if (j.contains("backbone_seed")) c.backbone_seed = j.at("backbone_seed").get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
    if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
      j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_from_json(j);
}

DatasetIndex resolve_dataset(const DatasetConfig& config) {
  if (config.name == "synthetic") return make_synthetic(config.synthetic);
  std::string root = config.root;
  if (root.empty()) {
    const char* env = std::getenv(kDataRootEnv);
    if (env == nullptr || *env == '\0') {
      throw ConfigError(fmt::format("dataset.root is empty and {} is not set", kDataRootEnv));
    }
    root = env;
  }
  if (config.name == "index") return load_index(root);
  return load_dataset(parse_dataset_name(config.name), root);
}

BackboneSpec resolve_backbone(const ExperimentConfig& config, const DatasetIndex& dataset) {
  BackboneSpec spec = config.backbone;
  if (spec.profile == "toy") {
    spec.input = dataset.shape;
    if (spec.mean.size() != static_cast<std::size_t>(spec.input.channels)) {
      spec.mean.assign(static_cast<std::size_t>(spec.input.channels), 0.0);
      spec.std.assign(static_cast<std::size_t>(spec.input.channels), 1.0);
    }
  }
  spec.validate();
  return spec;
}

GenerateResult cmd_generate(const ExperimentConfig& config) {
  config.validate();
  const DatasetIndex dataset = resolve_dataset(config.dataset);
  const fs::path out_dir(config.output_dir);
  ensure_dir(out_dir);
  const StreamManifest manifest = generate_stream(dataset.train, config.scenario, dataset.name);
  GenerateResult r;
  r.manifest_path = out_dir / "manifest.jsonl";
  write_manifest(r.manifest_path, manifest);
  r.stats = format_stats(manifest);
  write_text(out_dir / "stats.txt", r.stats);
  if (config.dataset.name == "synthetic") save_index(dataset, out_dir / "index");
  return r;
}

RunSummary cmd_run(const ExperimentConfig& config) {
  config.validate();
  const DatasetIndex dataset = resolve_dataset(config.dataset);
  const BackboneSpec spec = resolve_backbone(config, dataset);
  auto backbone = std::make_shared<const Backbone>(Backbone::create(spec, config.backbone_seed));
  const fs::path out_dir(config.output_dir);
  ensure_dir(out_dir);

  ExperimentConfig effective = config;
  effective.backbone = spec;
  if (effective.train.checkpoint_dir.empty()) effective.train.checkpoint_dir = (out_dir / "checkpoints").string();
  write_text(out_dir / "config.json", to_json(effective).dump(2) + "\n");

  std::optional<StreamManifest> fixed;
  if (!config.manifest.empty()) fixed = read_manifest(fs::path(config.manifest));

  const auto& seeds = config.train.seeds;
  RunSummary summary;
  summary.seeds.resize(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      const std::uint64_t seed = seeds[i];
      SeedOutcome& out = summary.seeds[i];
      out.seed = seed;
      out.record_path = out_dir / fmt::format("record_seed{}.jsonl", seed);
      RunRecord record;
      try {
        StreamManifest manifest;
        if (fixed) {
          manifest = *fixed;
        } else {
          ScenarioConfig sc = config.scenario;
          sc.seed = seed;
          manifest = generate_stream(dataset.train, sc, dataset.name);
          write_manifest(out_dir / fmt::format("manifest_seed{}.jsonl", seed), manifest);
        }
        run_online(manifest, dataset, backbone, effective.train, seed, &record);
        out.ok = true;
        out.a_auc = a_auc(record.curve());
        out.a_last = a_last(record);
        out.forgetting = forgetting(record.per_class_best_acc, record.per_class_final_acc);
      } catch (const NonFiniteLossError& e) {
        out.error = e.what();
        record.error = fmt::format("{}: {}", e.what(), e.dump());
      } catch (const std::exception& e) {
        out.error = e.what();
        record.error = e.what();
      }
      try {
        write_record(out.record_path, record);
      } catch (const std::exception& e) {
        out.ok = false;
        out.error += std::string(out.error.empty() ? "" : "; ") + e.what();
      }
      spdlog::info("seed {}: {}", seed, out.ok ? fmt::format("A_last {:.4f}", out.a_last) : "failed: " + out.error);
    }
  };
  const int n_threads = std::min<int>(config.workers, static_cast<int>(seeds.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<double> auc, last, forg;
  ojson seeds_json = ojson::array();
  for (const auto& s : summary.seeds) {
    ojson sj;
    sj["seed"] = s.seed;
    sj["record"] = s.record_path.filename().string();
    sj["ok"] = s.ok;
    if (s.ok) {
      sj["a_auc"] = s.a_auc;
      sj["a_last"] = s.a_last;
      sj["forgetting"] = s.forgetting;
      auc.push_back(s.a_auc);
      last.push_back(s.a_last);
      forg.push_back(s.forgetting);
    } else {
      sj["error"] = s.error;
      summary.failed = true;
    }
    seeds_json.push_back(sj);
  }
  ojson sum;
  sum["status"] = summary.failed ? "failed" : "ok";
  sum["method"] = to_string(config.train.method);
  sum["dataset"] = dataset.name;
  sum["seeds"] = seeds_json;
  if (!last.empty()) {
    summary.a_auc = aggregate(auc);
    summary.a_last = aggregate(last);
    summary.forgetting = aggregate(forg);
    sum["a_auc"] = aggregate_json(summary.a_auc);
    sum["a_last"] = aggregate_json(summary.a_last);
    sum["forgetting"] = aggregate_json(summary.forgetting);
  }
  summary.summary_path = out_dir / "summary.json";
  write_text(summary.summary_path, sum.dump(2) + "\n");
  return summary;
}

PlotResult cmd_plot(const std::vector<fs::path>& record_paths, const fs::path& out_dir) {
  if (record_paths.empty()) throw ConfigError("plot: at least one record is required");
  ensure_dir(out_dir);
  std::vector<RunRecord> records;
  for (const auto& p : record_paths) records.push_back(read_record(p));

  PlotResult result;
  std::vector<double> grid;
  for (const auto& r : records) {
    std::vector<double> xs;
    for (const auto& p : r.eval_points) xs.push_back(static_cast<double>(p.samples_seen));
    if (grid.empty()) {
      grid = xs;
    } else if (xs != grid) {
      result.resampled = true;
      std::vector<double> merged;
      std::set_union(grid.begin(), grid.end(), xs.begin(), xs.end(), std::back_inserter(merged));
      grid = std::move(merged);
    }
  }
  if (result.resampled) spdlog::warn("plot: evaluation grids differ; curves resampled onto the union grid");

  std::vector<Series> curves;
  std::vector<std::vector<double>> values(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) {
    const AccuracyCurve c = records[k].curve();
    Series s{fmt::format("seed {}", records[k].seed), grid, {}};
    for (double x : grid) s.y.push_back(c.points.empty() ? std::nan("") : interpolate(c, x));
    values[k] = s.y;
    curves.push_back(std::move(s));
  }
  std::vector<double> mean(grid.size()), lo(grid.size()), hi(grid.size());
  std::string csv = "samples_seen";
  for (const auto& r : records) csv += fmt::format(",seed_{}", r.seed);
  csv += ",mean,std\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<double> col;
    for (const auto& v : values) col.push_back(v[i]);
    const Aggregate a = aggregate(col);
    mean[i] = a.mean;
    lo[i] = a.mean - a.std;
    hi[i] = a.mean + a.std;
    csv += csv_number(grid[i]);
    for (double v : col) csv += "," + csv_number(v);
    csv += fmt::format(",{},{}\n", csv_number(a.mean), csv_number(a.std));
  }
  if (records.size() > 1) curves.push_back({"mean", grid, mean});
  const fs::path acc_csv = out_dir / "accuracy_curve.csv";
  const fs::path acc_svg = out_dir / "accuracy_curve.svg";
  write_text(acc_csv, csv);
  write_text(acc_svg, render_svg("Anytime accuracy on exposed classes", "samples seen", "accuracy", curves,
                                 records.size() > 1 ? grid : std::vector<double>{}, lo, hi));

  std::vector<Series> losses;
  std::size_t steps = 0;
  for (const auto& r : records) steps = std::max(steps, r.loss_trace.size());
  std::string loss_csv = "step";
  for (const auto& r : records) loss_csv += fmt::format(",seed_{}", r.seed);
  loss_csv += "\n";
  for (std::size_t i = 0; i < steps; ++i) {
    loss_csv += std::to_string(i);
    for (const auto& r : records) loss_csv += "," + (i < r.loss_trace.size() ? csv_number(r.loss_trace[i].total) : "");
    loss_csv += "\n";
  }
  for (const auto& r : records) {
    Series s{fmt::format("seed {}", r.seed), {}, {}};
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
      s.x.push_back(static_cast<double>(i));
      s.y.push_back(r.loss_trace[i].total);
    }
    losses.push_back(std::move(s));
  }
  const fs::path loss_csv_path = out_dir / "loss_trace.csv";
  const fs::path loss_svg = out_dir / "loss_trace.svg";
  write_text(loss_csv_path, loss_csv);
  write_text(loss_svg, render_svg("Training loss", "step", "total loss", losses));
  result.files = {acc_svg, acc_csv, loss_svg, loss_csv_path};
  return result;
}

std::vector<fs::path> cmd_export_pool(const fs::path& checkpoint, const fs::path& out_dir) {
  const ModelState state = load_checkpoint(checkpoint, nullptr);
  ensure_dir(out_dir);
  auto matrix_csv = [](const Matrix& m) {
    std::string s;
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) s += (j ? "," : "") + csv_number(m(i, j));
      s += "\n";
    }
    return s;
  };
  std::string counts;
  for (auto c : state.pool.counts) counts += std::to_string(c) + "\n";
  const std::vector<fs::path> files{out_dir / "keys.csv", out_dir / "masks.csv", out_dir / "counts.csv"};
  write_text(files[0], matrix_csv(state.pool.keys));
  write_text(files[1], matrix_csv(state.pool.masks));
  write_text(files[2], counts);
  return files;
}

std::vector<std::string> download_commands(DatasetName name, const fs::path& root) {
  const std::string r = root.string();
  switch (name) {
    case DatasetName::cifar100:
      return {fmt::format("mkdir -p '{}'", r),
              fmt::format("curl -fL -o '{}/cifar-100-binary.tar.gz' https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz", r),
              fmt::format("tar -xzf '{0}/cifar-100-binary.tar.gz' -C '{0}'", r)};
    case DatasetName::tiny_imagenet:
      return {fmt::format("mkdir -p '{}'", r),
              fmt::format("curl -fL -o '{}/tiny-imagenet-200.zip' http://cs231n.stanford.edu/tiny-imagenet-200.zip", r),
              fmt::format("python3 -m zipfile -e '{0}/tiny-imagenet-200.zip' '{0}'", r)};
    case DatasetName::imagenet_r:
      return {fmt::format("mkdir -p '{}'", r),
              fmt::format("curl -fL -o '{}/imagenet-r.tar' https://people.eecs.berkeley.edu/~hendrycks/imagenet-r.tar", r),
              fmt::format("tar -xf '{0}/imagenet-r.tar' -C '{0}'", r)};
  }
  return {};
}

int cmd_download_data(DatasetName name, const fs::path& root, bool dry_run, std::ostream& log) {
  for (const auto& cmd : download_commands(name, root)) {
    log << cmd << '\n';
    if (dry_run) continue;
    if (std::system(cmd.c_str()) != 0) throw IoError("command failed: " + cmd);
  }
  log << "expected layout: " << dataset_layout(name) << '\n';
  return 0;
}

std::string error_record(const std::exception& e) {
  ojson j;
  const auto* err = dynamic_cast<const Error*>(&e);
  j["error"]["kind"] = err ? err->kind() : "internal";
  j["error"]["message"] = e.what();
  if (const auto* nf = dynamic_cast<const NonFiniteLossError*>(&e)) j["error"]["dump"] = json::parse(nf->dump());
  return j.dump();
}

}  // namespace siblurry
