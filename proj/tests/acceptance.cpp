// Acceptance runner: one PASS/FAIL/SKIP line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "siblurry/cli.hpp"
#include "siblurry/engine.hpp"
#include "siblurry/error.hpp"
#include "siblurry/metrics.hpp"
#include "siblurry/mvp.hpp"
#include "siblurry/replay.hpp"
#include "siblurry/scenario.hpp"
#include "support.hpp"

namespace siblurry {
namespace {

struct Outcome {
  enum Status { pass, fail, skip } status = pass;
  std::string detail;
};

/// Collects failed checks for one criterion.
struct Checks {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  Outcome outcome(std::string detail) const {
    if (failures.empty()) return {Outcome::pass, std::move(detail)};
    std::string msg = failures.front();
    if (failures.size() > 1) msg += fmt::format(" (+{} more)", failures.size() - 1);
    return {Outcome::fail, msg + "; " + detail};
  }
};

/// Decimal hand values are not exactly representable; "exact" means agreement to rounding error.
bool close(double a, double b) { return std::abs(a - b) <= 1e-12; }

std::string manifest_bytes(const StreamManifest& m) {
  std::ostringstream out;
  write_manifest(out, m);
  return out.str();
}

// 1. Scenario invariants on 50 random configurations.
Outcome scenario_invariants() {
  const DatasetIndex data = make_synthetic(100, 8, 20, 0.1, 0);
  const ClassSamples& index = data.train;
  std::map<SampleId, ClassId> owner;
  for (std::size_t c = 0; c < index.size(); ++c) {
    for (SampleId id : index[c]) owner[id] = static_cast<ClassId>(c);
  }
  std::multiset<SampleId> all;
  for (const auto& [id, c] : owner) all.insert(id);

  Checks checks;
  Rng meta(20240);
  for (int trial = 0; trial < 50; ++trial) {
    ScenarioConfig cfg;
    cfg.seed = meta.next();
    cfg.num_tasks = 1 + static_cast<int>(meta.uniform_index(10));
    cfg.disjoint_class_ratio = meta.uniform();
    cfg.blurry_sample_ratio = meta.uniform();
    const StreamManifest m = generate_stream(index, cfg, data.name);
    const std::string tag = fmt::format("trial {}", trial);

    std::multiset<SampleId> streamed;
    for (const auto& e : m.entries) streamed.insert(e.sample_id);
    checks.expect(streamed == all, tag + ": sample conservation");

    const std::set<ClassId> disjoint(m.partition.disjoint_classes.begin(), m.partition.disjoint_classes.end());
    bool exclusive = true;
    for (const auto& e : m.entries) {
      if (disjoint.contains(e.class_id) && e.task_index != m.assignment.home_task(e.class_id)) exclusive = false;
    }
    checks.expect(exclusive, tag + ": disjoint exclusivity");

    std::map<ClassId, std::size_t> pooled;
    for (SampleId id : m.pooled_samples) ++pooled[owner.at(id)];
    bool exact = true;
    for (ClassId c : m.partition.blurry_classes) {
      const auto n = static_cast<double>(index[static_cast<std::size_t>(c)].size());
      exact = exact && pooled[c] == round_half_up(cfg.blurry_sample_ratio * n);
    }
    for (ClassId c : m.partition.disjoint_classes) exact = exact && pooled[c] == 0;
    checks.expect(exact, tag + ": pool exactness");

    checks.expect(manifest_bytes(m) == manifest_bytes(generate_stream(index, cfg, data.name)),
                  tag + ": byte determinism");
  }
  return checks.outcome("50 configs on a 100-class synthetic index");
}

// 2. Equation oracles.
Outcome equation_oracles() {
  Checks checks;
  Rng rng(2);
  const Matrix key = test::random_matrix(1, 16, rng);
  const double cv = cvpt_loss(key, {0}, key);
  checks.expect(std::abs(cv - std::log(2.0)) <= 1e-9, fmt::format("cvpt hand case {}", cv));

  const Matrix z = test::random_matrix(8, 10, rng);
  Labels y;
  for (int i = 0; i < 8; ++i) y.push_back(static_cast<ClassId>(rng.uniform_index(10)));
  const Vector scores = test::random_matrix(8, 1, rng).cwiseAbs();
  checks.expect(std::abs(gsf_loss(z, y, scores, 0.0) - cross_entropy(z, y).mean()) <= 1e-6, "gsf gamma=0");

  const Matrix h = test::random_matrix(3, 16, rng);
  const Matrix scaled = afs_scale(h, (Vector(3) << 1.0, 0.5, 2.5).finished());
  checks.expect(scaled.row(0) == h.row(0), "afs unit score");
  checks.expect(close(scaled.row(1).norm() / h.row(1).norm(), 2.0), "afs score 0.5");
  checks.expect(close(scaled.row(2).norm() / h.row(2).norm(), 0.4), "afs score 2.5");

  checks.expect(close(total_loss(2.0, 4.0, 0.7, 0.0).total, 2.7), "total alpha=0");
  checks.expect(close(total_loss(2.0, 4.0, 0.7, 1.0).total, 4.7), "total alpha=1");
  checks.expect(close(total_loss(2.0, 4.0, 0.7, 0.5).total, 3.7), "total alpha=0.5");
  return checks.outcome(fmt::format("cvpt={:.12f}", cv));
}

// 3. Finite-difference gradient suite on the depth-2, D=64 toy backbone, batch 8.
Outcome gradient_suite() {
  Checks checks;
  double worst = 0.0;
  auto record = [&](double err, const std::string& what) {
    worst = std::max(worst, err);
    checks.expect(err < 1e-4, fmt::format("{} relative error {:.2e}", what, err));
  };

  Rng rng(3);
  {
    const Matrix keys = test::random_matrix(10, 64, rng);
    const Matrix queries = test::random_matrix(8, 64, rng);
    const std::vector<std::int64_t> counts{0, 4, 1, 0, 7, 2, 0, 3, 1, 5};
    ad::Tape tape;
    const ad::Var k = tape.leaf(keys, true);
    tape.backward(cvpt_loss(k, counts, queries));
    record(test::relative_error(tape.grad(k), test::numeric_gradient(
                                                  [&](const Matrix& m) { return cvpt_loss(m, counts, queries); }, keys)),
           "cvpt keys");
  }

  const DatasetIndex data = make_synthetic(10, 64, 10, 0.05, 0);
  const auto backbone = std::make_shared<const Backbone>(Backbone::random(BackboneSpec::toy(), 0));
  std::vector<ReplayItem> items;
  for (int i = 0; i < 8; ++i) {
    const SampleId id = data.train[static_cast<std::size_t>(i)][0];
    items.push_back({id, data.label_of(id)});
  }
  const Batch batch = make_batch(data, *backbone, items);

  auto run_suite = [&](const TrainConfig& c, const std::string& name) {
    ModelState state = ModelState::create(backbone, 10, c, 3);
    state.pool.masks += test::random_matrix(state.pool.masks.rows(), state.pool.masks.cols(), rng, 0.3);
    for (std::size_t p = 0; p < state.pool.counts.size(); ++p) state.pool.counts[p] = static_cast<std::int64_t>(p % 3);
    const auto selections = nearest_keys(batch.queries, state.pool.keys, 1);
    ad::Tape probe(false);
    const MvpGraph g0 = build_mvp_graph(probe, state, batch, selections, c);
    const FrozenScores frozen{g0.ignore_scores, g0.mb_scores};
    auto total = [&](const ModelState& st) {
      ad::Tape tape(false);
      return tape.scalar(build_mvp_graph(tape, st, batch, selections, c, frozen).total);
    };
    ad::Tape tape;
    const MvpGraph g = build_mvp_graph(tape, state, batch, selections, c, frozen);
    tape.backward(g.total);
    auto check = [&](const Matrix& analytic, const std::function<void(ModelState&, const Matrix&)>& set,
                     const Matrix& x0, const std::string& what) {
      const Matrix fd = test::numeric_gradient(
          [&](const Matrix& x) {
            ModelState st = state;
            set(st, x);
            return total(st);
          },
          x0);
      record(test::relative_error(analytic, fd), name + " " + what);
    };
    check(tape.grad(g.head), [](ModelState& st, const Matrix& x) { st.head = x; }, state.head, "W");
    check(tape.grad(g.masks), [](ModelState& st, const Matrix& x) { st.pool.masks = x; }, state.pool.masks, "masks");
    if (c.use_cvpt) {
      check(tape.grad(g.keys), [](ModelState& st, const Matrix& x) { st.pool.keys = x; }, state.pool.keys, "keys");
    }
    for (std::size_t p = 0; p < state.pool.prompts.size(); ++p) {
      if (tape.grad(g.prompts[p]).norm() == 0.0) continue;
      check(tape.grad(g.prompts[p]), [p](ModelState& st, const Matrix& x) { st.pool.prompts[p] = x; },
            state.pool.prompts[p], fmt::format("prompt {}", p));
    }
  };

  TrainConfig masked_ce;
  masked_ce.pool_size = 4;
  masked_ce.use_cvpt = false;
  masked_ce.use_gsf = false;
  masked_ce.use_afs = false;
  run_suite(masked_ce, "masked CE");
  TrainConfig full;
  full.pool_size = 4;
  run_suite(full, "total loss");
  return checks.outcome(fmt::format("worst relative error {:.2e}", worst));
}

// 4. Analytic per-sample head gradients vs per-sample autodiff.
Outcome per_sample_gradients() {
  Checks checks;
  Rng rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix h = test::random_matrix(8, 16, rng);
    const Matrix w = test::random_matrix(16, 10, rng, 0.5);
    Labels y;
    for (int i = 0; i < 8; ++i) y.push_back(static_cast<ClassId>(rng.uniform_index(10)));
    const Matrix g = per_sample_label_gradients(h, y, w);
    for (Index i = 0; i < 8; ++i) {
      ad::Tape tape;
      const ad::Var wv = tape.leaf(w, true);
      const Labels yi{y[static_cast<std::size_t>(i)]};
      tape.backward(ad::sum(ad::cross_entropy_rows(ad::matmul(tape.constant(h.row(i)), wv), yi)));
      const double err = (g.row(i) - tape.grad(wv).col(yi[0]).transpose()).cwiseAbs().maxCoeff();
      worst = std::max(worst, err);
    }
  }
  checks.expect(worst <= 1e-6, fmt::format("max abs deviation {:.2e}", worst));
  return checks.outcome(fmt::format("100 batches, max abs deviation {:.2e}", worst));
}

// 5. Reservoir uniformity.
Outcome reservoir_uniformity() {
  constexpr int kTrials = 20000;
  constexpr std::size_t kItems = 100;
  std::vector<double> hits(kItems, 0.0);
  Rng root(5);
  for (int t = 0; t < kTrials; ++t) {
    Rng rng = root.split(static_cast<std::uint64_t>(t));
    ReplayBuffer b(2);
    for (std::size_t i = 0; i < kItems; ++i) reservoir_update(b, {i, 0}, rng);
    for (const auto& it : b.items) hits[it.sample_id] += 1.0;
  }
  const double p = 2.0 / kItems;
  const double sigma = std::sqrt(p * (1.0 - p) / kTrials);
  double worst = 0.0, chi2 = 0.0;
  for (double h : hits) {
    worst = std::max(worst, std::abs(h / kTrials - p) / sigma);
    chi2 += (h - p * kTrials) * (h - p * kTrials) / (p * kTrials);
  }
  const double pvalue = test::chi_square_sf(chi2, kItems - 1);
  Checks checks;
  checks.expect(worst <= 3.0, fmt::format("max deviation {:.2f} sigma", worst));
  checks.expect(pvalue > 0.01, fmt::format("chi-square p {:.4f}", pvalue));
  return checks.outcome(fmt::format("max deviation {:.2f} sigma, chi-square p {:.3f}", worst, pvalue));
}

// 6. Metric oracles.
Outcome metric_oracles() {
  Checks checks;
  checks.expect(close(a_auc({{{0, 0.5}, {50, 0.5}, {100, 0.5}}}), 0.5), "a_auc constant");
  checks.expect(close(a_auc({{{0, 0.0}, {100, 1.0}}}), 0.5), "a_auc ramp");
  checks.expect(close(a_auc({{{0, 0.2}, {50, 0.6}, {100, 0.4}}}), 0.45), "a_auc trapezoid");
  checks.expect(close(forgetting({0.8, 0.6}, {0.8, 0.2}), 0.2), "forgetting hand mean");
  checks.expect(forgetting({0.8, 0.6}, {0.8, 0.6}) == 0.0, "forgetting none");

  const DatasetIndex data = make_synthetic(5, 64, 30, 0.05, 0);
  const auto backbone = std::make_shared<const Backbone>(Backbone::random(BackboneSpec::toy(), 0));
  ScenarioConfig sc;
  sc.seed = 6;
  TrainConfig c;
  c.method = Method::mvp;
  const RunRecord r = run_online(generate_stream(data.train, sc, data.name), data, backbone, c, 6);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.test_ids.size(); ++i) hits += r.final_predictions[i] == data.label_of(r.test_ids[i]);
  const double recount = static_cast<double>(hits) / static_cast<double>(r.test_ids.size());
  checks.expect(a_last(r) == recount, fmt::format("a_last {} vs recount {}", a_last(r), recount));
  return checks.outcome(fmt::format("a_last recount {:.4f}", recount));
}

// 7 and 8. Desk-scale ordering and the frozen-backbone contract.
struct OrderingRuns {
  std::map<std::string, std::vector<double>> a_last, forgetting;
  bool hashes_ok = true;
  std::uint64_t hash = 0;
};

OrderingRuns run_ordering() {
  const DatasetIndex data = make_synthetic(SyntheticSpec{10, 64, 200, 0, 0.05, 0});
  const auto backbone = std::make_shared<const Backbone>(Backbone::random(BackboneSpec::toy(), 0));
  OrderingRuns out;
  out.hash = backbone->parameter_hash();
  for (std::uint64_t seed : {1, 2, 3}) {
    ScenarioConfig sc;
    sc.seed = seed;
    const StreamManifest m = generate_stream(data.train, sc, data.name);
    for (const auto& [name, method, memory] :
         {std::tuple{"mvp", Method::mvp, 0}, std::tuple{"linear_probe", Method::linear_probe, 0},
          std::tuple{"mvp_r", Method::mvp_r, 200}}) {
      TrainConfig c;
      c.method = method;
      c.memory_size = static_cast<std::size_t>(memory);
      const RunRecord r = run_online(m, data, backbone, c, seed);
      out.a_last[name].push_back(a_last(r));
      out.forgetting[name].push_back(forgetting(r.per_class_best_acc, r.per_class_final_acc));
      out.hashes_ok = out.hashes_ok && r.backbone_hash_before == out.hash && r.backbone_hash_after == out.hash;
      std::cout << fmt::format("    {:<13} seed {}: A_last {:.4f}  forgetting {:.4f}\n", name, seed,
                               out.a_last[name].back(), out.forgetting[name].back())
                << std::flush;
    }
  }
  out.hashes_ok = out.hashes_ok && backbone->parameter_hash() == out.hash;
  return out;
}

Outcome ordering(const OrderingRuns& runs) {
  const double mvp = aggregate(runs.a_last.at("mvp")).mean;
  const double lp = aggregate(runs.a_last.at("linear_probe")).mean;
  const double mvpr = aggregate(runs.a_last.at("mvp_r")).mean;
  const double f_mvp = aggregate(runs.forgetting.at("mvp")).mean;
  const double f_lp = aggregate(runs.forgetting.at("linear_probe")).mean;
  Checks checks;
  checks.expect(mvp > lp, fmt::format("(a) MVP {:.4f} <= linear_probe {:.4f}", mvp, lp));
  checks.expect(mvpr >= mvp, fmt::format("(b) MVP-R {:.4f} < MVP {:.4f}", mvpr, mvp));
  checks.expect(f_mvp <= f_lp + 0.05, fmt::format("(c) forgetting MVP {:.4f} > LP {:.4f} + 0.05", f_mvp, f_lp));
  return checks.outcome(fmt::format("A_last MVP {} LP {} MVP-R {}; forgetting MVP {:.4f} LP {:.4f}",
                                    format_percent(aggregate(runs.a_last.at("mvp"))),
                                    format_percent(aggregate(runs.a_last.at("linear_probe"))),
                                    format_percent(aggregate(runs.a_last.at("mvp_r"))), f_mvp, f_lp));
}

// 9. Optional full-scale check.
Outcome full_scale() {
  const char* ckpt = std::getenv("SIBLURRY_VIT_CHECKPOINT");
  const char* root = std::getenv(kDataRootEnv);
  const char* enabled = std::getenv("SIBLURRY_RUN_EXTENDED");
  if (!ckpt || !root || !enabled || std::string(enabled) != "1") {
    return {Outcome::skip, "needs SIBLURRY_RUN_EXTENDED=1, SIBLURRY_VIT_CHECKPOINT and a CIFAR-100 root"};
  }
  auto run = [&](Method method, const std::string& dir) {
    ExperimentConfig c;
    c.dataset.name = "cifar100";
    c.dataset.root = root;
    c.backbone = BackboneSpec::full();
    c.backbone.pretrained = ckpt;
    c.train.method = method;
    c.train.seeds = {1, 2, 3, 4, 5};
    c.output_dir = dir;
    return cmd_run(c);
  };
  const RunSummary mvp = run(Method::mvp, "acceptance_full_mvp");
  const RunSummary lp = run(Method::linear_probe, "acceptance_full_lp");
  Checks checks;
  checks.expect(!mvp.failed && !lp.failed, "a seed failed");
  checks.expect(mvp.a_last.mean >= 0.578, fmt::format("MVP A_last {:.4f} < 0.578", mvp.a_last.mean));
  checks.expect(mvp.a_last.mean > lp.a_last.mean + 0.2, "MVP does not clearly exceed linear probing");
  return checks.outcome(fmt::format("MVP {} LP {}", format_percent(mvp.a_last), format_percent(lp.a_last)));
}

}  // namespace
}  // namespace siblurry

int main() {
  using namespace siblurry;
  spdlog::set_level(spdlog::level::warn);
  int failures = 0;
  auto report = [&](int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (o.status == Outcome::pass && limit_s > 0 && secs > limit_s) {
      o = {Outcome::fail, fmt::format("runtime {:.1f}s over {:.0f}s budget; {}", secs, limit_s, o.detail)};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::fail ? "FAIL" : "SKIP";
    failures += o.status == Outcome::fail;
    std::cout << fmt::format("[{}] criterion {}: {} ({:.1f}s) {}\n", tag, id, name, secs, o.detail) << std::flush;
  };

  report(1, "scenario invariants", 30, scenario_invariants);
  report(2, "equation oracles", 5, equation_oracles);
  report(3, "gradient suite", 120, gradient_suite);
  report(4, "per-sample gradient oracle", 0, per_sample_gradients);
  report(5, "reservoir uniformity", 0, reservoir_uniformity);
  report(6, "metric oracles", 0, metric_oracles);
  OrderingRuns runs;
  report(7, "end-to-end ordering", 600, [&] {
    runs = run_ordering();
    return ordering(runs);
  });
  report(8, "frozen backbone", 0, [&] {
    if (runs.a_last.empty()) return Outcome{Outcome::fail, "criterion 7 runs unavailable"};
    return runs.hashes_ok ? Outcome{Outcome::pass, fmt::format("hash {:016x} unchanged over 9 runs", runs.hash)}
                          : Outcome{Outcome::fail, "backbone hash changed"};
  });
  report(9, "full-scale CIFAR-100 (optional)", 0, full_scale);
  std::cout << (failures == 0 ? "acceptance: all required criteria passed\n"
                              : fmt::format("acceptance: {} criteria failed\n", failures));
  return failures == 0 ? 0 : 1;
}
