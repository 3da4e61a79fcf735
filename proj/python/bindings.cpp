#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <sstream>

#include "siblurry/cli.hpp"
#include "siblurry/config.hpp"
#include "siblurry/error.hpp"

namespace py = pybind11;
using namespace siblurry;

namespace {

ExperimentConfig experiment_from_text(const std::string& text, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, true, true);
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_from_json(j);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

py::dict manifest_dict(const StreamManifest& m) {
  py::list entries;
  for (const auto& e : m.entries) entries.append(py::make_tuple(e.sample_id, e.class_id, e.task_index));
  py::dict d;
  d["entries"] = entries;
  d["task_boundaries"] = m.task_boundaries;
  d["pooled_samples"] = m.pooled_samples;
  d["disjoint_classes"] = m.partition.disjoint_classes;
  d["blurry_classes"] = m.partition.blurry_classes;
  d["class_to_task"] = m.assignment.class_to_task;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Si-Blurry online continual learning with mask and visual prompts";

  static py::exception<Error> base(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<IngestionError>(m, "IngestionError", base.ptr());
  py::register_exception<CorruptionError>(m, "CorruptionError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<NonFiniteLossError>(m, "NonFiniteLossError", base.ptr());

  // Losses and scores.
  m.def("cosine_distance", [](const Vector& a, const Vector& b) { return cosine_distance(a, b); });
  m.def("cvpt_loss", py::overload_cast<const Matrix&, const std::vector<std::int64_t>&, const Matrix&>(&cvpt_loss),
        py::arg("keys"), py::arg("counts"), py::arg("queries"));
  m.def("nearest_keys", &nearest_keys, py::arg("queries"), py::arg("keys"), py::arg("k") = 1);
  m.def("apply_mask", py::overload_cast<const Matrix&, const RowVector&>(&apply_mask), py::arg("logits"),
        py::arg("mask"));
  m.def("cross_entropy", &cross_entropy, py::arg("logits"), py::arg("labels"), py::arg("allowed") = std::vector<bool>{});
  m.def("per_sample_label_gradients", &per_sample_label_gradients, py::arg("h"), py::arg("labels"), py::arg("w"));
  m.def("ignore_scores", &ignore_scores, py::arg("h"), py::arg("labels"), py::arg("w"));
  m.def("gsf_loss",
        py::overload_cast<const Matrix&, const Labels&, const Vector&, double, const std::vector<bool>&>(&gsf_loss),
        py::arg("logits"), py::arg("labels"), py::arg("scores"), py::arg("gamma"),
        py::arg("allowed") = std::vector<bool>{});
  m.def("marginal_benefit_scores", &marginal_benefit_scores, py::arg("h"), py::arg("labels"), py::arg("w"),
        py::arg("margin") = 0.5);
  m.def("afs_scale", py::overload_cast<const Matrix&, const Vector&>(&afs_scale), py::arg("h"), py::arg("scores"));
  m.def(
      "total_loss",
      [](double ce, double gsf, double cvpt, double alpha) {
        const LossBreakdown b = total_loss(ce, gsf, cvpt, alpha);
        return py::dict(py::arg("ce") = b.ce, py::arg("gsf") = b.gsf, py::arg("cvpt") = b.cvpt,
                        py::arg("total") = b.total);
      },
      py::arg("ce"), py::arg("gsf"), py::arg("cvpt"), py::arg("alpha") = 0.5);

  // Metrics.
  m.def(
      "a_auc",
      [](const std::vector<double>& xs, const std::vector<double>& ys) {
        if (xs.size() != ys.size()) throw ContractError("a_auc: x and y lengths differ");
        AccuracyCurve c;
        for (std::size_t i = 0; i < xs.size(); ++i) c.points.push_back({xs[i], ys[i]});
        return a_auc(c);
      },
      py::arg("samples_seen"), py::arg("accuracy"));
  m.def("forgetting", &forgetting, py::arg("per_class_best"), py::arg("per_class_final"));
  m.def("aggregate", [](const std::vector<double>& v) {
    const Aggregate a = aggregate(v);
    return py::make_tuple(a.mean, a.std, a.n);
  });

  // Scenario.
  m.def(
      "generate_stream",
      [](const ClassSamples& index, const std::string& config_json) {
        return manifest_dict(generate_stream(index, nlohmann::json::parse(config_json).get<ScenarioConfig>()));
      },
      py::arg("class_samples"), py::arg("config_json") = "{}");
  m.def("round_half_up", &round_half_up);

  // Data and backbone.
  py::class_<DatasetIndex>(m, "Dataset")
      .def_readonly("name", &DatasetIndex::name)
      .def_readonly("num_classes", &DatasetIndex::num_classes)
      .def_readonly("train", &DatasetIndex::train)
      .def_readonly("test", &DatasetIndex::test)
      .def_readonly("labels", &DatasetIndex::labels)
      .def("fetch_rows", [](const DatasetIndex& d, const std::vector<SampleId>& ids) { return d.fetch_rows(ids); });
  m.def(
      "make_synthetic",
      [](const std::string& spec_json) { return make_synthetic(nlohmann::json::parse(spec_json).get<SyntheticSpec>()); },
      py::arg("spec_json") = "{}");
  m.def("load_index", &load_index);
  m.def("load_dataset", [](const std::string& name, const std::filesystem::path& root) {
    return load_dataset(parse_dataset_name(name), root);
  });

  py::class_<Backbone>(m, "Backbone")
      .def_static(
          "toy",
          [](int input_dim, std::uint64_t seed) { return Backbone::random(BackboneSpec::toy(input_dim), seed); },
          py::arg("input_dim") = 64, py::arg("seed") = 0)
      .def_property_readonly("embed_dim", &Backbone::embed_dim)
      .def("extract_query", &Backbone::extract_query)
      .def("parameter_hash", &Backbone::parameter_hash)
      .def("save", &Backbone::save);

  // Experiment commands; configs travel as JSON text.
  m.def(
      "effective_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        return to_json(experiment_from_text(text, overrides)).dump();
      },
      py::arg("config_json"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "generate",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const GenerateResult r = cmd_generate(experiment_from_text(text, overrides));
        return py::make_tuple(r.manifest_path, r.stats);
      },
      py::arg("config_json"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "run",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const ExperimentConfig c = experiment_from_text(text, overrides);
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = cmd_run(c);
        }
        return slurp(s.summary_path);
      },
      py::arg("config_json"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "plot",
      [](const std::vector<std::filesystem::path>& records, const std::filesystem::path& out) {
        return cmd_plot(records, out).files;
      },
      py::arg("records"), py::arg("out_dir"));
  m.def("export_pool", &cmd_export_pool, py::arg("checkpoint"), py::arg("out_dir"));
  m.def("read_record", [](const std::filesystem::path& p) {
    std::ostringstream out;
    write_record(out, read_record(p));
    return out.str();
  });
}
