#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "siblurry/cli.hpp"
#include "siblurry/error.hpp"

namespace fs = std::filesystem;
using namespace siblurry;

int main(int argc, char** argv) {
  CLI::App app{"Online continual learning on Si-Blurry streams"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON experiment config");
    cmd->add_option("-s,--set", overrides, "Override a config value, e.g. train.lr=0.01")->take_all();
  };

  auto* generate = app.add_subcommand("generate", "Write the stream manifest and per-task statistics");
  add_config(generate);
  auto* run = app.add_subcommand("run", "Train every configured seed and write records and a summary");
  add_config(run);

  auto* plot = app.add_subcommand("plot", "Render accuracy curves and loss traces from run records");
  std::vector<std::string> records;
  std::string plot_out = "plots";
  plot->add_option("records", records, "Record files")->required();
  plot->add_option("-o,--out", plot_out, "Output directory");

  auto* export_pool = app.add_subcommand("export-pool", "Dump pool keys, masks and counts as CSV");
  std::string checkpoint;
  std::string export_out = "pool";
  export_pool->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  export_pool->add_option("-o,--out", export_out, "Output directory");

  auto* download = app.add_subcommand("download-data", "Fetch and unpack a benchmark dataset");
  std::string dataset_name;
  std::string root;
  bool dry_run = false;
  download->add_option("dataset", dataset_name, "cifar100 | tiny_imagenet | imagenet_r")->required();
  download->add_option("--root", root, std::string("Destination; defaults to $") + kDataRootEnv);
  download->add_flag("--dry-run", dry_run, "Print the commands without running them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    if (*generate) {
      const ExperimentConfig config = load_experiment(config_path, overrides);
      const GenerateResult r = cmd_generate(config);
      std::cout << r.stats << "manifest: " << r.manifest_path.string() << '\n';
    } else if (*run) {
      const ExperimentConfig config = load_experiment(config_path, overrides);
      const RunSummary s = cmd_run(config);
      for (const auto& seed : s.seeds) {
        if (seed.ok) {
          std::cout << "seed " << seed.seed << ": A_auc " << seed.a_auc << " A_last " << seed.a_last
                    << " forgetting " << seed.forgetting << '\n';
        } else {
          std::cout << "seed " << seed.seed << ": failed (" << seed.error << ")\n";
        }
      }
      if (!s.seeds.empty() && s.a_last.n > 0) {
        std::cout << "A_auc " << format_percent(s.a_auc) << "  A_last " << format_percent(s.a_last)
                  << "  forgetting " << format_percent(s.forgetting) << '\n';
      }
      std::cout << "summary: " << s.summary_path.string() << '\n';
      if (s.failed) {
        std::cerr << R"({"error":{"kind":"run","message":"one or more seeds failed; see summary"}})" << '\n';
        return 1;
      }
    } else if (*plot) {
      std::vector<fs::path> paths(records.begin(), records.end());
      const PlotResult r = cmd_plot(paths, plot_out);
      if (r.resampled) std::cout << "note: eval grids differ; curves resampled onto the union grid\n";
      for (const auto& f : r.files) std::cout << f.string() << '\n';
    } else if (*export_pool) {
      for (const auto& f : cmd_export_pool(checkpoint, export_out)) std::cout << f.string() << '\n';
    } else if (*download) {
      if (root.empty()) {
        const char* env = std::getenv(kDataRootEnv);
        if (env == nullptr || *env == '\0') throw ConfigError(std::string("--root not given and $") + kDataRootEnv + " unset");
        root = env;
      }
      return cmd_download_data(parse_dataset_name(dataset_name), root, dry_run, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << error_record(e) << '\n';
    return 2;
  }
  return 0;
}
