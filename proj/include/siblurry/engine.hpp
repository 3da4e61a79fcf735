#pragma once

// Online training loop and baselines.
//
// Every stream batch is seen exactly once. Learners receive sample ids,
// inputs and labels only; task indices stay inside the manifest.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "siblurry/backbone.hpp"
#include "siblurry/datasets.hpp"
#include "siblurry/metrics.hpp"
#include "siblurry/mvp.hpp"
#include "siblurry/optimizer.hpp"
#include "siblurry/replay.hpp"
#include "siblurry/scenario.hpp"

namespace siblurry {

enum class Method { mvp, mvp_r, finetune_head, linear_probe, er };
enum class ReplayMode { augment, split };

Method parse_method(std::string_view name);
std::string to_string(Method m);
ReplayMode parse_replay_mode(std::string_view name);
std::string to_string(ReplayMode m);

struct TrainConfig {
  Method method = Method::mvp;
  double lr = 0.005;
  int batch_size = 32;
  double alpha = 0.5;
  double gamma = 2.0;
  double margin = 0.5;
  /// Samples between anytime evaluations; 0 selects total_samples / 100
  /// (at least batch_size).
  std::size_t eval_period = 0;
  std::vector<std::uint64_t> seeds{1};
  int pool_size = 10;
  int top_k = 1;
  double prompt_init = 1.0;
  std::size_t memory_size = 0;
  ReplayMode replay_mode = ReplayMode::augment;
  bool use_mask = true;
  bool use_cvpt = true;
  bool use_gsf = true;
  bool use_afs = true;
  bool mask_at_eval = true;
  bool restrict_ce_to_seen = false;
  /// Save a checkpoint every k training steps (0 disables).
  std::size_t checkpoint_every = 0;
  std::string checkpoint_dir;
  std::size_t eval_chunk = 256;
  bool cache_queries = true;

  bool uses_prompts() const { return method == Method::mvp || method == Method::mvp_r; }
  bool uses_memory() const { return method == Method::mvp_r || method == Method::er; }
  AdamConfig adam() const { return AdamConfig{lr}; }
  void validate() const;
};

struct ModelState {
  std::shared_ptr<const Backbone> backbone;
  int num_classes = 0;
  Matrix head;  // [D x num_classes]
  PromptPool pool;
  AdamSlot head_slot;
  AdamSlot keys_slot;
  AdamSlot masks_slot;
  std::vector<AdamSlot> prompt_slots;
  /// Classes with at least one streamed training sample.
  std::vector<bool> seen;
  long steps = 0;

  static ModelState create(std::shared_ptr<const Backbone> backbone, int num_classes, const TrainConfig& config,
                           std::uint64_t seed);
};

struct Batch {
  std::vector<SampleId> ids;
  Labels labels;
  Matrix inputs;   // preprocessed, one row per sample
  Matrix queries;  // prompt-free features; computed on demand when empty

  std::size_t size() const { return labels.size(); }
};

/// Frozen prompt-free features keyed by sample id.
class QueryCache {
 public:
  const RowVector* find(SampleId id) const;
  void insert(SampleId id, const RowVector& q) { map_.emplace(id, q); }
  std::size_t size() const { return map_.size(); }

 private:
  std::unordered_map<SampleId, RowVector> map_;
};

/// Fetches, preprocesses and attaches cached queries.
Batch make_batch(const DatasetIndex& dataset, const Backbone& backbone, std::span<const ReplayItem> items,
                 QueryCache* cache = nullptr);

/// Scores treated as constants when differentiating numerically.
struct FrozenScores {
  Vector ignore;
  Vector mb;
};

struct MvpGraph {
  ad::Var head, keys, masks;
  std::vector<ad::Var> prompts;
  ad::Var ce, gsf, cvpt, total;
  Vector ignore_scores;
  Vector mb_scores;
};

/// Records the loss of one MVP step on `tape` without mutating `state`.
/// `selections` lists the chosen pool entries per sample (nearest first);
/// counts in `state.pool` are used as they are.
MvpGraph build_mvp_graph(ad::Tape& tape, const ModelState& state, const Batch& batch,
                         const std::vector<std::vector<int>>& selections, const TrainConfig& config,
                         const std::optional<FrozenScores>& frozen = std::nullopt);

/// select -> prompted forward -> scale -> classify -> mask -> scores -> loss
/// -> one Adam step on head, keys, masks and prompts.
LossBreakdown train_step(ModelState& state, Batch& batch, const TrainConfig& config);

/// Cross-entropy on classify(extract_query(x)); only the head is updated.
LossBreakdown baseline_step(ModelState& state, Batch& batch, const TrainConfig& config);

struct EvalResult {
  double accuracy = 0.0;
  /// NaN for classes outside the evaluated set.
  std::vector<double> per_class;
  std::vector<SampleId> ids;
  std::vector<ClassId> predictions;
  std::vector<ClassId> labels;
};

/// Top-1 accuracy on test samples of the exposed classes, argmax restricted
/// to those classes. Does not mutate `state`.
EvalResult evaluate(const ModelState& state, const DatasetIndex& dataset, const std::vector<bool>& exposed,
                    const TrainConfig& config, QueryCache* cache = nullptr);
double evaluate_exposed(const ModelState& state, const DatasetIndex& dataset, const std::vector<ClassId>& exposed,
                        const TrainConfig& config);

struct EvalPoint {
  std::size_t samples_seen = 0;
  double accuracy = 0.0;

  bool operator==(const EvalPoint&) const = default;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::string method;
  std::string config_json;
  std::vector<EvalPoint> eval_points;
  std::vector<double> per_class_best_acc;
  std::vector<double> per_class_final_acc;
  double final_full_test_acc = 0.0;
  std::vector<SampleId> test_ids;
  std::vector<ClassId> final_predictions;
  std::vector<ClassId> test_labels;
  std::vector<LossBreakdown> loss_trace;
  std::int64_t total_selections = 0;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
  std::size_t samples_seen = 0;
  bool completed = false;
  std::string error;

  AccuracyCurve curve() const;
};

/// Evaluation thresholds used by run_online for a stream of n samples.
std::size_t effective_eval_period(const TrainConfig& config, std::size_t n);

/// Streams the manifest once. When `progress` is given the record is built in
/// place there, so a caller keeps the partial record if a step throws.
RunRecord run_online(const StreamManifest& manifest, const DatasetIndex& dataset,
                     std::shared_ptr<const Backbone> backbone, const TrainConfig& config, std::uint64_t seed,
                     RunRecord* progress = nullptr, ModelState* final_state = nullptr);

double a_last(const RunRecord& record);

// Line-delimited records: config, one per eval point, one per step, summary.
void write_record(std::ostream& out, const RunRecord& record);
void write_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord read_record(std::istream& in);
RunRecord read_record(const std::filesystem::path& path);

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
/// Restores trainable state; the backbone must match the one saved with it.
ModelState load_checkpoint(const std::filesystem::path& path, std::shared_ptr<const Backbone> backbone);

}  // namespace siblurry
