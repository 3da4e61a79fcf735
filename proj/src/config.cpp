#include "siblurry/config.hpp"

#include <set>

#include <fmt/format.h>

#include "siblurry/error.hpp"

namespace siblurry {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* section) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", section));
  const std::set<std::string> known(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError(fmt::format("{}: unknown key '{}'", section, it.key()));
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const char* section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

}  // namespace

void to_json(json& j, const ScenarioConfig& c) {
  j = json{{"num_tasks", c.num_tasks},
           {"disjoint_class_ratio", c.disjoint_class_ratio},
           {"blurry_sample_ratio", c.blurry_sample_ratio},
           {"seed", c.seed},
           {"batch_size", c.batch_size},
           {"leak_excludes_home", c.leak_excludes_home},
           {"balanced_assignment", c.balanced_assignment}};
}

void from_json(const json& j, ScenarioConfig& c) {
  constexpr const char* s = "scenario";
  reject_unknown(j, {"num_tasks", "disjoint_class_ratio", "blurry_sample_ratio", "seed", "batch_size",
                     "leak_excludes_home", "balanced_assignment"}, s);
  read(j, "num_tasks", c.num_tasks, s);
  read(j, "disjoint_class_ratio", c.disjoint_class_ratio, s);
  read(j, "blurry_sample_ratio", c.blurry_sample_ratio, s);
  read(j, "seed", c.seed, s);
  read(j, "batch_size", c.batch_size, s);
  read(j, "leak_excludes_home", c.leak_excludes_home, s);
  read(j, "balanced_assignment", c.balanced_assignment, s);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"method", to_string(c.method)},
           {"lr", c.lr},
           {"batch_size", c.batch_size},
           {"alpha", c.alpha},
           {"gamma", c.gamma},
           {"margin", c.margin},
           {"eval_period", c.eval_period},
           {"seeds", c.seeds},
           {"pool_size", c.pool_size},
           {"top_k", c.top_k},
           {"prompt_init", c.prompt_init},
           {"memory_size", c.memory_size},
           {"replay_mode", to_string(c.replay_mode)},
           {"use_mask", c.use_mask},
           {"use_cvpt", c.use_cvpt},
           {"use_gsf", c.use_gsf},
           {"use_afs", c.use_afs},
           {"mask_at_eval", c.mask_at_eval},
           {"restrict_ce_to_seen", c.restrict_ce_to_seen},
           {"checkpoint_every", c.checkpoint_every},
           {"checkpoint_dir", c.checkpoint_dir},
           {"eval_chunk", c.eval_chunk},
           {"cache_queries", c.cache_queries}};
}

void from_json(const json& j, TrainConfig& c) {
  constexpr const char* s = "train";
  reject_unknown(j, {"method", "lr", "batch_size", "alpha", "gamma", "margin", "eval_period", "seeds", "pool_size",
                     "top_k", "prompt_init", "memory_size", "replay_mode", "use_mask", "use_cvpt", "use_gsf",
                     "use_afs", "mask_at_eval", "restrict_ce_to_seen", "checkpoint_every", "checkpoint_dir",
                     "eval_chunk", "cache_queries"}, s);
  if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
  if (j.contains("replay_mode")) c.replay_mode = parse_replay_mode(j.at("replay_mode").get<std::string>());
  read(j, "lr", c.lr, s);
  read(j, "batch_size", c.batch_size, s);
  read(j, "alpha", c.alpha, s);
  read(j, "gamma", c.gamma, s);
  read(j, "margin", c.margin, s);
  read(j, "eval_period", c.eval_period, s);
  read(j, "seeds", c.seeds, s);
  read(j, "pool_size", c.pool_size, s);
  read(j, "top_k", c.top_k, s);
  read(j, "prompt_init", c.prompt_init, s);
  read(j, "memory_size", c.memory_size, s);
  read(j, "use_mask", c.use_mask, s);
  read(j, "use_cvpt", c.use_cvpt, s);
  read(j, "use_gsf", c.use_gsf, s);
  read(j, "use_afs", c.use_afs, s);
  read(j, "mask_at_eval", c.mask_at_eval, s);
  read(j, "restrict_ce_to_seen", c.restrict_ce_to_seen, s);
  read(j, "checkpoint_every", c.checkpoint_every, s);
  read(j, "checkpoint_dir", c.checkpoint_dir, s);
  read(j, "eval_chunk", c.eval_chunk, s);
  read(j, "cache_queries", c.cache_queries, s);
}

void to_json(json& j, const SyntheticSpec& c) {
  j = json{{"num_classes", c.num_classes}, {"dim", c.dim},   {"per_class", c.per_class},
           {"test_per_class", c.test_per_class}, {"noise", c.noise}, {"seed", c.seed}};
}

void from_json(const json& j, SyntheticSpec& c) {
  constexpr const char* s = "synthetic";
  reject_unknown(j, {"num_classes", "dim", "per_class", "test_per_class", "noise", "seed"}, s);
  read(j, "num_classes", c.num_classes, s);
  read(j, "dim", c.dim, s);
  read(j, "per_class", c.per_class, s);
  read(j, "test_per_class", c.test_per_class, s);
  read(j, "noise", c.noise, s);
  read(j, "seed", c.seed, s);
}

void to_json(json& j, const BackboneSpec& c) {
  j = json{{"profile", c.profile},
           {"depth", c.depth},
           {"embed_dim", c.embed_dim},
           {"num_heads", c.num_heads},
           {"mlp_dim", c.mlp_dim},
           {"patch_size", c.patch_size},
           {"input", {c.input.channels, c.input.height, c.input.width}},
           {"prompt_layers", c.prompt_layers},
           {"prompt_length", c.prompt_length},
           {"pretrained", c.pretrained},
           {"mean", c.mean},
           {"std", c.std},
           {"ln_eps", c.ln_eps}};
}

void from_json(const json& j, BackboneSpec& c) {
  constexpr const char* s = "backbone";
  reject_unknown(j, {"profile", "depth", "embed_dim", "num_heads", "mlp_dim", "patch_size", "input",
                     "prompt_layers", "prompt_length", "pretrained", "mean", "std", "ln_eps"}, s);
  if (j.contains("profile")) {
    const auto profile = j.at("profile").get<std::string>();
    if (profile == "toy") {
      c = BackboneSpec::toy();
    } else if (profile == "full") {
      c = BackboneSpec::full();
    } else {
      throw ConfigError("backbone.profile must be 'toy' or 'full'");
    }
  }
  read(j, "depth", c.depth, s);
  read(j, "embed_dim", c.embed_dim, s);
  read(j, "num_heads", c.num_heads, s);
  read(j, "mlp_dim", c.mlp_dim, s);
  read(j, "patch_size", c.patch_size, s);
  if (j.contains("input")) {
    const auto v = j.at("input").get<std::vector<int>>();
    if (v.size() != 3) throw ConfigError("backbone.input must be [channels, height, width]");
    c.input = {v[0], v[1], v[2]};
  }
  read(j, "prompt_layers", c.prompt_layers, s);
  read(j, "prompt_length", c.prompt_length, s);
  read(j, "pretrained", c.pretrained, s);
  read(j, "mean", c.mean, s);
  read(j, "std", c.std, s);
  read(j, "ln_eps", c.ln_eps, s);
}

}  // namespace siblurry
