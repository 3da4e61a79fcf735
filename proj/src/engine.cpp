#include "siblurry/engine.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "siblurry/config.hpp"
#include "siblurry/error.hpp"
#include "siblurry/safetensors.hpp"

namespace siblurry {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Mean of the selected mask rows per sample.
Matrix gathered_masks(const Matrix& masks, const std::vector<std::vector<int>>& selections) {
  Matrix out(static_cast<Index>(selections.size()), masks.cols());
  for (std::size_t i = 0; i < selections.size(); ++i) {
    RowVector m = RowVector::Zero(masks.cols());
    for (int p : selections[i]) m += masks.row(p);
    out.row(static_cast<Index>(i)) = m / static_cast<double>(selections[i].size());
  }
  return out;
}

std::vector<int> first_choice(const std::vector<std::vector<int>>& selections) {
  std::vector<int> out;
  out.reserve(selections.size());
  for (const auto& s : selections) out.push_back(s.front());
  return out;
}

void ensure_queries(const Backbone& backbone, Batch& batch) {
  if (batch.queries.rows() != static_cast<Index>(batch.size())) batch.queries = backbone.extract_query(batch.inputs);
}

void check_finite(const LossBreakdown& b, const Batch& batch, long step) {
  if (std::isfinite(b.total) && std::isfinite(b.ce) && std::isfinite(b.gsf) && std::isfinite(b.cvpt)) return;
  ojson dump;
  dump["step"] = step;
  dump["sample_ids"] = batch.ids;
  dump["labels"] = batch.labels;
  dump["ce"] = b.ce;
  dump["gsf"] = b.gsf;
  dump["cvpt"] = b.cvpt;
  dump["total"] = b.total;
  throw NonFiniteLossError(fmt::format("non-finite loss at step {}", step), dump.dump());
}

/// Queries for `ids`, fetched from the cache or computed from `inputs` rows.
Matrix queries_for(const DatasetIndex& dataset, const Backbone& backbone, std::span<const SampleId> ids,
                   QueryCache* cache, Matrix* inputs_out) {
  const Index n = static_cast<Index>(ids.size());
  Matrix q(n, backbone.embed_dim());
  std::vector<SampleId> missing;
  std::vector<Index> missing_rows;
  for (Index i = 0; i < n; ++i) {
    const RowVector* hit = cache ? cache->find(ids[static_cast<std::size_t>(i)]) : nullptr;
    if (hit) {
      q.row(i) = *hit;
    } else {
      missing.push_back(ids[static_cast<std::size_t>(i)]);
      missing_rows.push_back(i);
    }
  }
  if (inputs_out) *inputs_out = backbone.preprocess(dataset.fetch_rows(ids), dataset.shape);
  if (!missing.empty()) {
    Matrix x;
    if (inputs_out) {
      x.resize(static_cast<Index>(missing.size()), inputs_out->cols());
      for (std::size_t k = 0; k < missing.size(); ++k) x.row(static_cast<Index>(k)) = inputs_out->row(missing_rows[k]);
    } else {
      x = backbone.preprocess(dataset.fetch_rows(missing), dataset.shape);
    }
    const Matrix computed = backbone.extract_query(x);
    for (std::size_t k = 0; k < missing.size(); ++k) {
      q.row(missing_rows[k]) = computed.row(static_cast<Index>(k));
      if (cache) cache->insert(missing[k], computed.row(static_cast<Index>(k)));
    }
  }
  return q;
}

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double null_to_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::vector<double> doubles_from(const json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(null_to_nan(v));
  return out;
}

json doubles_to(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(nan_to_null(x));
  return a;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

Method parse_method(std::string_view name) {
  if (name == "mvp") return Method::mvp;
  if (name == "mvp_r") return Method::mvp_r;
  if (name == "finetune_head") return Method::finetune_head;
  if (name == "linear_probe") return Method::linear_probe;
  if (name == "er") return Method::er;
  throw ConfigError(fmt::format("unknown method '{}'", name));
}

std::string to_string(Method m) {
  switch (m) {
    case Method::mvp: return "mvp";
    case Method::mvp_r: return "mvp_r";
    case Method::finetune_head: return "finetune_head";
    case Method::linear_probe: return "linear_probe";
    case Method::er: return "er";
  }
  return "?";
}

ReplayMode parse_replay_mode(std::string_view name) {
  if (name == "augment") return ReplayMode::augment;
  if (name == "split") return ReplayMode::split;
  throw ConfigError(fmt::format("unknown replay mode '{}'", name));
}

std::string to_string(ReplayMode m) { return m == ReplayMode::augment ? "augment" : "split"; }

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be nonnegative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("train.alpha must lie in [0, 1]");
  if (gamma < 0.0) throw ConfigError("train.gamma must be nonnegative");
  if (!(margin > 0.0)) throw ConfigError("train.margin must be positive");
  if (eval_period != 0 && eval_period < static_cast<std::size_t>(batch_size)) {
    throw ConfigError("train.eval_period must be >= batch_size");
  }
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  if (pool_size < 1) throw ConfigError("train.pool_size must be >= 1");
  if (top_k < 1 || top_k > pool_size) throw ConfigError("train.top_k must lie in [1, pool_size]");
  if (eval_chunk < 1) throw ConfigError("train.eval_chunk must be >= 1");
}

const RowVector* QueryCache::find(SampleId id) const {
  auto it = map_.find(id);
  return it == map_.end() ? nullptr : &it->second;
}

ModelState ModelState::create(std::shared_ptr<const Backbone> backbone, int num_classes, const TrainConfig& config,
                              std::uint64_t seed) {
  if (!backbone) throw ContractError("model state needs a backbone");
  if (num_classes < 1) throw ContractError("model state needs at least one class");
  config.validate();
  ModelState s;
  const Index d = backbone->embed_dim();
  s.num_classes = num_classes;
  Rng root(seed);
  Rng head_rng = root.split("head");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  s.head.resize(d, num_classes);
  for (Index i = 0; i < d; ++i) {
    for (Index c = 0; c < num_classes; ++c) s.head(i, c) = head_rng.uniform(-bound, bound);
  }
  Rng pool_rng = root.split("pool");
  s.pool = PromptPool::create(config.pool_size, d, num_classes, backbone->spec().prompt_rows(), pool_rng,
                              config.prompt_init);
  s.prompt_slots.resize(static_cast<std::size_t>(config.pool_size));
  s.seen.assign(static_cast<std::size_t>(num_classes), false);
  s.backbone = std::move(backbone);
  return s;
}

Batch make_batch(const DatasetIndex& dataset, const Backbone& backbone, std::span<const ReplayItem> items,
                 QueryCache* cache) {
  Batch b;
  for (const auto& it : items) {
    if (dataset.label_of(it.sample_id) != it.class_id) {
      throw ContractError(fmt::format("sample {} is labelled {} in the dataset but {} in the stream", it.sample_id,
                                      dataset.label_of(it.sample_id), it.class_id));
    }
    b.ids.push_back(it.sample_id);
    b.labels.push_back(it.class_id);
  }
  b.queries = queries_for(dataset, backbone, b.ids, cache, &b.inputs);
  return b;
}

MvpGraph build_mvp_graph(ad::Tape& tape, const ModelState& state, const Batch& batch,
                         const std::vector<std::vector<int>>& selections, const TrainConfig& config,
                         const std::optional<FrozenScores>& frozen) {
  if (batch.size() == 0) throw ContractError("train_step: empty batch");
  if (selections.size() != batch.size()) throw ContractError("train_step: one selection per sample is required");
  if (batch.queries.rows() != static_cast<Index>(batch.size())) throw ContractError("train_step: queries missing");
  const Backbone& backbone = *state.backbone;
  const PromptPool& pool = state.pool;

  MvpGraph g;
  g.head = tape.leaf(state.head, true);
  g.keys = tape.leaf(pool.keys, true);
  g.masks = tape.leaf(pool.masks, true);
  for (const auto& p : pool.prompts) g.prompts.push_back(tape.leaf(p, true));

  const std::vector<int> chosen = first_choice(selections);
  ad::Var h = backbone.forward(tape, batch.inputs, g.prompts, chosen);

  if (config.use_afs) {
    g.mb_scores = frozen ? frozen->mb
                         : marginal_benefit_scores(tape.value(h), batch.labels, state.head, config.margin);
    h = afs_scale(h, g.mb_scores);
  }
  ad::Var logits = ad::matmul(h, g.head);
  if (config.use_mask) logits = apply_mask(logits, g.masks, selections);

  const std::vector<bool> allowed = config.restrict_ce_to_seen ? state.seen : std::vector<bool>{};
  const ad::Var ce_rows = ad::cross_entropy_rows(logits, batch.labels, allowed);
  g.ce = ad::mean(ce_rows);
  g.cvpt = config.use_cvpt ? cvpt_loss(g.keys, pool.counts, batch.queries) : tape.constant(Matrix::Zero(1, 1));

  if (config.use_gsf) {
    if (frozen) {
      g.ignore_scores = frozen->ignore;
    } else {
      // d CE_i / d (h'_i . W_c) = (softmax - onehot)[i, c] * mask[i, c].
      Matrix dlogits = softmax_rows(tape.value(logits), allowed);
      for (std::size_t i = 0; i < batch.size(); ++i) dlogits(static_cast<Index>(i), batch.labels[i]) -= 1.0;
      if (config.use_mask) dlogits = dlogits.cwiseProduct(gathered_masks(pool.masks, selections));
      g.ignore_scores = ignore_scores_from_logit_grads(dlogits, tape.value(h), batch.labels);
    }
    g.gsf = gsf_loss(ce_rows, g.ignore_scores, config.gamma);
    g.total = total_loss(g.ce, g.gsf, g.cvpt, config.alpha);
  } else {
    g.gsf = tape.constant(Matrix::Zero(1, 1));
    g.total = ad::add(g.ce, g.cvpt);
  }
  return g;
}

LossBreakdown train_step(ModelState& state, Batch& batch, const TrainConfig& config) {
  if (batch.size() == 0) throw ContractError("train_step: empty batch");
  ensure_queries(*state.backbone, batch);
  for (ClassId y : batch.labels) state.seen.at(static_cast<std::size_t>(y)) = true;

  const auto selections = nearest_keys(batch.queries, state.pool.keys, config.top_k);
  for (const auto& s : selections) {
    for (int p : s) ++state.pool.counts[static_cast<std::size_t>(p)];
  }

  ad::Tape tape;
  const MvpGraph g = build_mvp_graph(tape, state, batch, selections, config);
  LossBreakdown b;
  b.ce = tape.scalar(g.ce);
  b.gsf = tape.scalar(g.gsf);
  b.cvpt = tape.scalar(g.cvpt);
  b.total = tape.scalar(g.total);
  b.ignore_scores = g.ignore_scores;
  b.mb_scores = g.mb_scores;
  check_finite(b, batch, state.steps);

  tape.backward(g.total);
  const AdamConfig adam = config.adam();
  adam_step(state.head, tape.grad(g.head), state.head_slot, adam, state.seen);
  adam_step(state.pool.keys, tape.grad(g.keys), state.keys_slot, adam);
  adam_step(state.pool.masks, tape.grad(g.masks), state.masks_slot, adam);
  for (std::size_t p = 0; p < g.prompts.size(); ++p) {
    adam_step(state.pool.prompts[p], tape.grad(g.prompts[p]), state.prompt_slots[p], adam);
  }
  ++state.steps;
  return b;
}

LossBreakdown baseline_step(ModelState& state, Batch& batch, const TrainConfig& config) {
  if (config.uses_prompts()) throw ConfigError("baseline_step: unknown baseline method " + to_string(config.method));
  if (batch.size() == 0) throw ContractError("baseline_step: empty batch");
  ensure_queries(*state.backbone, batch);
  for (ClassId y : batch.labels) state.seen.at(static_cast<std::size_t>(y)) = true;

  ad::Tape tape;
  const ad::Var head = tape.leaf(state.head, true);
  const ad::Var logits = ad::matmul(tape.ref(batch.queries), head);
  const std::vector<bool> allowed = config.restrict_ce_to_seen ? state.seen : std::vector<bool>{};
  const ad::Var ce = ad::mean(ad::cross_entropy_rows(logits, batch.labels, allowed));
  LossBreakdown b;
  b.ce = b.total = tape.scalar(ce);
  check_finite(b, batch, state.steps);
  tape.backward(ce);
  adam_step(state.head, tape.grad(head), state.head_slot, config.adam(), state.seen);
  ++state.steps;
  return b;
}

EvalResult evaluate(const ModelState& state, const DatasetIndex& dataset, const std::vector<bool>& exposed,
                    const TrainConfig& config, QueryCache* cache) {
  if (static_cast<int>(exposed.size()) != state.num_classes) throw ContractError("evaluate: exposed mask width");
  if (std::none_of(exposed.begin(), exposed.end(), [](bool b) { return b; })) {
    throw ContractError("evaluate: no exposed classes");
  }
  const Backbone& backbone = *state.backbone;
  EvalResult r;
  for (std::size_t c = 0; c < dataset.test.size(); ++c) {
    if (!exposed[c]) continue;
    r.ids.insert(r.ids.end(), dataset.test[c].begin(), dataset.test[c].end());
  }
  std::sort(r.ids.begin(), r.ids.end());
  for (SampleId id : r.ids) r.labels.push_back(dataset.label_of(id));

  for (std::size_t start = 0; start < r.ids.size(); start += config.eval_chunk) {
    const std::size_t n = std::min(config.eval_chunk, r.ids.size() - start);
    const std::span<const SampleId> ids(r.ids.data() + start, n);
    Matrix inputs;
    const Matrix q = queries_for(dataset, backbone, ids, cache, config.uses_prompts() ? &inputs : nullptr);
    Matrix logits;
    if (config.uses_prompts()) {
      const auto selections = nearest_keys(q, state.pool.keys, config.top_k);
      ad::Tape tape(false);
      std::vector<ad::Var> prompts;
      for (const auto& p : state.pool.prompts) prompts.push_back(tape.ref(p));
      const Matrix h = tape.value(backbone.forward(tape, inputs, prompts, first_choice(selections)));
      logits = h * state.head;
      if (config.use_mask && config.mask_at_eval) {
        logits = logits.cwiseProduct(gathered_masks(state.pool.masks, selections));
      }
    } else {
      logits = q * state.head;
    }
    for (Index i = 0; i < logits.rows(); ++i) {
      ClassId best = -1;
      for (Index c = 0; c < logits.cols(); ++c) {
        if (!exposed[static_cast<std::size_t>(c)]) continue;
        if (best < 0 || logits(i, c) > logits(i, best)) best = static_cast<ClassId>(c);
      }
      r.predictions.push_back(best);
    }
  }

  std::vector<std::size_t> correct(exposed.size(), 0);
  std::vector<std::size_t> total(exposed.size(), 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    const auto y = static_cast<std::size_t>(r.labels[i]);
    ++total[y];
    if (r.predictions[i] == r.labels[i]) {
      ++correct[y];
      ++hits;
    }
  }
  r.accuracy = r.ids.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(r.ids.size());
  r.per_class.assign(exposed.size(), kNaN);
  for (std::size_t c = 0; c < exposed.size(); ++c) {
    if (total[c] > 0) r.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  }
  return r;
}

double evaluate_exposed(const ModelState& state, const DatasetIndex& dataset, const std::vector<ClassId>& exposed,
                        const TrainConfig& config) {
  std::vector<bool> mask(static_cast<std::size_t>(state.num_classes), false);
  for (ClassId c : exposed) mask.at(static_cast<std::size_t>(c)) = true;
  return evaluate(state, dataset, mask, config).accuracy;
}

AccuracyCurve RunRecord::curve() const {
  AccuracyCurve c;
  for (const auto& p : eval_points) c.points.push_back({static_cast<double>(p.samples_seen), p.accuracy});
  return c;
}

std::size_t effective_eval_period(const TrainConfig& config, std::size_t n) {
  if (config.eval_period > 0) return config.eval_period;
  return std::max<std::size_t>(static_cast<std::size_t>(config.batch_size), n / 100);
}

RunRecord run_online(const StreamManifest& manifest, const DatasetIndex& dataset,
                     std::shared_ptr<const Backbone> backbone, const TrainConfig& config, std::uint64_t seed,
                     RunRecord* progress, ModelState* final_state) {
  config.validate();
  if (manifest.entries.empty()) throw ContractError("run_online: empty manifest");
  RunRecord local;
  RunRecord& rec = progress ? *progress : local;
  rec = RunRecord{};
  rec.seed = seed;
  rec.method = to_string(config.method);
  json cfg = config;
  rec.config_json = cfg.dump();
  rec.backbone_hash_before = backbone->parameter_hash();

  ModelState state = ModelState::create(backbone, dataset.num_classes, config, seed);
  Rng replay_rng = Rng(seed).split("replay");
  ReplayBuffer buffer(config.uses_memory() ? config.memory_size : 0);
  QueryCache cache;
  QueryCache* cache_ptr = config.cache_queries ? &cache : nullptr;

  const std::size_t n = manifest.entries.size();
  const std::size_t period = effective_eval_period(config, n);
  const bool split = config.uses_memory() && config.replay_mode == ReplayMode::split && config.memory_size > 0;
  const std::size_t stream_bs = split ? std::max(1, config.batch_size / 2) : static_cast<std::size_t>(config.batch_size);

  std::vector<bool> exposed(static_cast<std::size_t>(dataset.num_classes), false);
  rec.per_class_best_acc.assign(exposed.size(), kNaN);
  auto track_best = [&](const EvalResult& r) {
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
      if (std::isnan(r.per_class[c])) continue;
      double& best = rec.per_class_best_acc[c];
      best = std::isnan(best) ? r.per_class[c] : std::max(best, r.per_class[c]);
    }
  };

  std::size_t next_eval = period;
  std::vector<ReplayItem> stream;
  for (const auto slice : iterate_stream(manifest, stream_bs)) {
    stream.clear();
    for (const auto& e : slice) {
      if (e.class_id < 0 || e.class_id >= dataset.num_classes) throw ContractError("run_online: class id out of range");
      stream.push_back({e.sample_id, e.class_id});
      exposed[static_cast<std::size_t>(e.class_id)] = true;
    }
    const std::vector<ReplayItem> items =
        config.uses_memory() ? compose_batch(stream, buffer, replay_rng) : stream;
    Batch batch = make_batch(dataset, *backbone, items, cache_ptr);
    const LossBreakdown loss =
        config.uses_prompts() ? train_step(state, batch, config) : baseline_step(state, batch, config);
    rec.loss_trace.push_back(loss);
    if (config.uses_memory()) {
      for (const auto& it : stream) reservoir_update(buffer, it, replay_rng);
    }
    rec.samples_seen += stream.size();
    rec.total_selections = state.pool.total_selections();

    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() &&
        static_cast<std::size_t>(state.steps) % config.checkpoint_every == 0) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_checkpoint(state, std::filesystem::path(config.checkpoint_dir) /
                                 fmt::format("seed{}_step{:06}.safetensors", seed, state.steps));
    }
    if (rec.samples_seen >= next_eval && rec.samples_seen < n) {
      const EvalResult r = evaluate(state, dataset, exposed, config, cache_ptr);
      rec.eval_points.push_back({rec.samples_seen, r.accuracy});
      track_best(r);
      while (next_eval <= rec.samples_seen) next_eval += period;
    }
  }

  const EvalResult last = evaluate(state, dataset, exposed, config, cache_ptr);
  rec.eval_points.push_back({rec.samples_seen, last.accuracy});
  track_best(last);

  const EvalResult full = evaluate(state, dataset, std::vector<bool>(exposed.size(), true), config, cache_ptr);
  rec.final_full_test_acc = full.accuracy;
  rec.per_class_final_acc = full.per_class;
  track_best(full);
  rec.test_ids = full.ids;
  rec.test_labels = full.labels;
  rec.final_predictions = full.predictions;
  rec.total_selections = state.pool.total_selections();
  rec.backbone_hash_after = backbone->parameter_hash();
  rec.completed = true;

  if (!config.checkpoint_dir.empty()) {
    std::filesystem::create_directories(config.checkpoint_dir);
    save_checkpoint(state, std::filesystem::path(config.checkpoint_dir) / fmt::format("seed{}_final.safetensors", seed));
  }
  if (final_state) *final_state = std::move(state);
  return progress ? *progress : local;
}

double a_last(const RunRecord& record) {
  if (!record.completed) throw ContractError("a_last: run did not complete");
  return record.final_full_test_acc;
}

void write_record(std::ostream& out, const RunRecord& r) {
  ojson head;
  head["type"] = "config";
  head["seed"] = r.seed;
  head["method"] = r.method;
  head["config"] = r.config_json.empty() ? ojson::object() : ojson::parse(r.config_json);
  out << head.dump() << '\n';
  for (const auto& p : r.eval_points) {
    ojson e;
    e["type"] = "eval";
    e["samples_seen"] = p.samples_seen;
    e["accuracy"] = p.accuracy;
    out << e.dump() << '\n';
  }
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    const auto& b = r.loss_trace[i];
    ojson s;
    s["type"] = "step";
    s["step"] = i;
    s["ce"] = nan_to_null(b.ce);
    s["gsf"] = nan_to_null(b.gsf);
    s["cvpt"] = nan_to_null(b.cvpt);
    s["total"] = nan_to_null(b.total);
    s["ignore_scores"] = doubles_to(std::vector<double>(b.ignore_scores.begin(), b.ignore_scores.end()));
    s["mb_scores"] = doubles_to(std::vector<double>(b.mb_scores.begin(), b.mb_scores.end()));
    out << s.dump() << '\n';
  }
  ojson sum;
  sum["type"] = "summary";
  sum["completed"] = r.completed;
  sum["error"] = r.error;
  sum["samples_seen"] = r.samples_seen;
  sum["a_auc"] = r.eval_points.empty() ? json(nullptr) : json(a_auc(r.curve()));
  sum["a_last"] = r.completed ? json(r.final_full_test_acc) : json(nullptr);
  json forg = nullptr;
  if (r.completed) forg = forgetting(r.per_class_best_acc, r.per_class_final_acc);
  sum["forgetting"] = forg;
  sum["final_full_test_acc"] = nan_to_null(r.final_full_test_acc);
  sum["per_class_best_acc"] = doubles_to(r.per_class_best_acc);
  sum["per_class_final_acc"] = doubles_to(r.per_class_final_acc);
  sum["total_selections"] = r.total_selections;
  sum["backbone_hash_before"] = hex64(r.backbone_hash_before);
  sum["backbone_hash_after"] = hex64(r.backbone_hash_after);
  sum["test_ids"] = r.test_ids;
  sum["test_labels"] = r.test_labels;
  sum["final_predictions"] = r.final_predictions;
  out << sum.dump() << '\n';
}

void write_record(const std::filesystem::path& path, const RunRecord& record) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_record(out, record);
  if (!out) throw IoError("failed writing " + path.string());
}

RunRecord read_record(std::istream& in) {
  RunRecord r;
  bool have_summary = false;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "config") {
        r.seed = j.at("seed").get<std::uint64_t>();
        r.method = j.at("method").get<std::string>();
        r.config_json = j.at("config").dump();
      } else if (type == "eval") {
        r.eval_points.push_back({j.at("samples_seen").get<std::size_t>(), j.at("accuracy").get<double>()});
      } else if (type == "step") {
        LossBreakdown b;
        b.ce = null_to_nan(j.at("ce"));
        b.gsf = null_to_nan(j.at("gsf"));
        b.cvpt = null_to_nan(j.at("cvpt"));
        b.total = null_to_nan(j.at("total"));
        const auto ig = doubles_from(j.at("ignore_scores"));
        const auto mb = doubles_from(j.at("mb_scores"));
        b.ignore_scores = Eigen::Map<const Vector>(ig.data(), static_cast<Index>(ig.size()));
        b.mb_scores = Eigen::Map<const Vector>(mb.data(), static_cast<Index>(mb.size()));
        r.loss_trace.push_back(std::move(b));
      } else if (type == "summary") {
        have_summary = true;
        r.completed = j.at("completed").get<bool>();
        r.error = j.at("error").get<std::string>();
        r.samples_seen = j.at("samples_seen").get<std::size_t>();
        r.final_full_test_acc = null_to_nan(j.at("final_full_test_acc"));
        r.per_class_best_acc = doubles_from(j.at("per_class_best_acc"));
        r.per_class_final_acc = doubles_from(j.at("per_class_final_acc"));
        r.total_selections = j.at("total_selections").get<std::int64_t>();
        r.backbone_hash_before = parse_hex64(j.at("backbone_hash_before").get<std::string>());
        r.backbone_hash_after = parse_hex64(j.at("backbone_hash_after").get<std::string>());
        r.test_ids = j.at("test_ids").get<std::vector<SampleId>>();
        r.test_labels = j.at("test_labels").get<std::vector<ClassId>>();
        r.final_predictions = j.at("final_predictions").get<std::vector<ClassId>>();
      } else {
        throw LoadError("run record: unknown record type '" + type + "'");
      }
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("run record: ") + e.what());
  }
  if (!have_summary) throw LoadError("run record: missing summary record");
  return r;
}

RunRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  return read_record(in);
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  TensorFile f;
  f.tensors["head"] = Tensor::from_matrix(state.head);
  f.tensors["pool.keys"] = Tensor::from_matrix(state.pool.keys);
  f.tensors["pool.masks"] = Tensor::from_matrix(state.pool.masks);
  for (std::size_t p = 0; p < state.pool.prompts.size(); ++p) {
    f.tensors[fmt::format("pool.prompts.{}", p)] = Tensor::from_matrix(state.pool.prompts[p]);
  }
  f.int_tensors["pool.counts"] = state.pool.counts;
  f.int_tensors["seen"] = std::vector<std::int64_t>(state.seen.begin(), state.seen.end());
  auto put_slot = [&](const std::string& name, const AdamSlot& slot) {
    if (slot.m.size() == 0) return;
    f.tensors[name + ".m"] = Tensor::from_matrix(slot.m);
    f.tensors[name + ".v"] = Tensor::from_matrix(slot.v);
    f.metadata[name + ".step"] = std::to_string(slot.step);
  };
  put_slot("adam.head", state.head_slot);
  put_slot("adam.keys", state.keys_slot);
  put_slot("adam.masks", state.masks_slot);
  for (std::size_t p = 0; p < state.prompt_slots.size(); ++p) put_slot(fmt::format("adam.prompts.{}", p), state.prompt_slots[p]);
  f.metadata["format"] = "siblurry-checkpoint";
  f.metadata["num_classes"] = std::to_string(state.num_classes);
  f.metadata["pool_size"] = std::to_string(state.pool.size());
  f.metadata["steps"] = std::to_string(state.steps);
  f.metadata["backbone_hash"] = hex64(state.backbone->parameter_hash());
  write_safetensors(path, f);
}

ModelState load_checkpoint(const std::filesystem::path& path, std::shared_ptr<const Backbone> backbone) {
  const TensorFile f = read_safetensors(path);
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = f.metadata.find(key);
    if (it == f.metadata.end()) throw LoadError(fmt::format("checkpoint {} lacks metadata '{}'", path.string(), key));
    return it->second;
  };
  auto tensor = [&](const std::string& key) {
    auto it = f.tensors.find(key);
    if (it == f.tensors.end()) throw LoadError(fmt::format("checkpoint {} lacks tensor '{}'", path.string(), key));
    return it->second.as_matrix();
  };
  auto ints = [&](const std::string& key) {
    auto it = f.int_tensors.find(key);
    if (it == f.int_tensors.end()) throw LoadError(fmt::format("checkpoint {} lacks tensor '{}'", path.string(), key));
    return it->second;
  };
  if (meta("format") != "siblurry-checkpoint") throw LoadError(path.string() + " is not a model checkpoint");
  if (backbone && parse_hex64(meta("backbone_hash")) != backbone->parameter_hash()) {
    throw LoadError("checkpoint was saved with a different backbone");
  }
  ModelState s;
  s.backbone = std::move(backbone);
  try {
    s.num_classes = std::stoi(meta("num_classes"));
    s.steps = std::stol(meta("steps"));
    const int pool_size = std::stoi(meta("pool_size"));
    s.head = tensor("head");
    s.pool.keys = tensor("pool.keys");
    s.pool.masks = tensor("pool.masks");
    for (int p = 0; p < pool_size; ++p) s.pool.prompts.push_back(tensor(fmt::format("pool.prompts.{}", p)));
    s.pool.counts = ints("pool.counts");
    const auto seen = ints("seen");
    s.seen.assign(seen.begin(), seen.end());
    auto get_slot = [&](const std::string& name, AdamSlot& slot) {
      if (!f.tensors.contains(name + ".m")) return;
      slot.m = tensor(name + ".m");
      slot.v = tensor(name + ".v");
      slot.step = std::stol(meta(name + ".step"));
    };
    get_slot("adam.head", s.head_slot);
    get_slot("adam.keys", s.keys_slot);
    get_slot("adam.masks", s.masks_slot);
    s.prompt_slots.resize(static_cast<std::size_t>(pool_size));
    for (int p = 0; p < pool_size; ++p) get_slot(fmt::format("adam.prompts.{}", p), s.prompt_slots[static_cast<std::size_t>(p)]);
  } catch (const std::invalid_argument&) {
    throw LoadError(path.string() + ": malformed metadata");
  }
  // A [1 x C] head (D = 1) is stored squeezed; as_matrix keeps it a row.
  if (s.head.cols() != s.num_classes || s.pool.masks.cols() != s.num_classes ||
      s.seen.size() != static_cast<std::size_t>(s.num_classes)) {
    throw LoadError(path.string() + ": tensor shapes disagree with num_classes");
  }
  try {
    s.pool.validate();
  } catch (const ContractError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return s;
}

}  // namespace siblurry
