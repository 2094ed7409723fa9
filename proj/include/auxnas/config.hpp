#pragma once

#include <set>
#include <string>
#include <vector>

#include "auxnas/search.hpp"

namespace auxnas {

enum class AuxMode { auto_, none, basic, genotype };

inline std::string aux_mode_name(AuxMode m) {
  switch (m) {
    case AuxMode::auto_: return "auto";
    case AuxMode::none: return "none";
    case AuxMode::basic: return "basic";
    case AuxMode::genotype: return "genotype";
  }
  return "?";
}

inline AuxMode parse_aux_mode(const std::string& s) {
  if (s == "auto") return AuxMode::auto_;
  if (s == "none") return AuxMode::none;
  if (s == "basic") return AuxMode::basic;
  if (s == "genotype") return AuxMode::genotype;
  throw ConfigError("unknown aux mode: " + s);
}

inline AuxMode aux_mode_of(const Strategy& s) {
  switch (s.kind) {
    case StrategyKind::auxi_single:
    case StrategyKind::auxi_both: return AuxMode::basic;
    case StrategyKind::auxi_nas: return AuxMode::genotype;
    default: return AuxMode::none;
  }
}

struct AuxSection {
  AuxMode mode = AuxMode::auto_;
  AggOp agg = AggOp::sum;
  std::string genotype_path;
  int c_aux = 16;
  bool strict_cross_task = false;
  int donor_task = 0;  // single-task donor for auxi-tN; 0 picks the first other task
};

struct SearchSection {
  int candidates = 200;
  int batch = 16;
  int short_iters = 200;
  std::uint64_t seed = 0;
  bool log_wall_time = false;
  PpoConfig ppo;
  int controller_embed = 32;
  int controller_hidden = 64;
};

struct Config {
  std::string data_dir = "data";
  data::GenConfig gen;
  ModelConfig model = [] {
    ModelConfig m;
    m.tasks = {{1, TaskKind::segmentation, 5}, {2, TaskKind::depth, 5}};
    return m;
  }();
  TrainConfig train;
  AuxSection aux;
  SearchSection search;
  std::string output_dir = "out";
};

namespace detail {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  template <class F>
  void get_as(const std::string& key, F&& parse) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) throw ConfigError(where(key) + " must be a string");
    parse(it->template get<std::string>());
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + where(it.key()));
  }

 private:
  std::string where(const std::string& key = "") const {
    return key.empty() ? (path_.empty() ? "config" : path_) : (path_.empty() ? key : path_ + "." + key);
  }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Config config_from_json_doc(const nlohmann::json& j) {
  Config c;
  detail::Section root(j, "");
  root.get("output_dir", c.output_dir);
  if (auto* d = root.sub("data")) {
    detail::Section s(*d, "data");
    s.get("dir", c.data_dir);
    s.get("seed", c.gen.seed);
    s.get("n", c.gen.n);
    s.get("height", c.gen.height);
    s.get("width", c.gen.width);
    s.get("classes", c.gen.classes);
    s.get("val_fraction", c.gen.val_fraction);
    s.get("test_fraction", c.gen.test_fraction);
    s.get("meta_val_fraction", c.gen.meta_val_fraction);
    s.finish();
  }
  if (auto* m = root.sub("model")) {
    detail::Section s(*m, "model");
    s.get_as("variant", [&](const std::string& v) { c.model.variant = parse_variant(v); });
    if (auto* ts = s.sub("tasks")) {
      if (!ts->is_array() || ts->empty()) throw ConfigError("model.tasks must be a non-empty array");
      c.model.tasks.clear();
      for (std::size_t i = 0; i < ts->size(); ++i) {
        detail::Section t((*ts)[i], "model.tasks[" + std::to_string(i) + "]");
        TaskSpec spec;
        spec.id = static_cast<int>(i) + 1;
        t.get("id", spec.id);
        t.get_as("kind", [&](const std::string& k) { spec.kind = parse_kind(k); });
        t.get("classes", spec.classes);
        t.finish();
        c.model.tasks.push_back(spec);
      }
    }
    s.get("stem_channels", c.model.stem_channels);
    s.get("tap_channels", c.model.stage_channels);
    s.get("decoder_channels", c.model.decoder_channels);
    s.get("aspp_branch", c.model.aspp_branch);
    s.finish();
  }
  if (auto* t = root.sub("train")) {
    detail::Section s(*t, "train");
    auto& tc = c.train;
    s.get("iters", tc.iters);
    s.get("lr0", tc.lr0);
    s.get("batch", tc.batch);
    s.get("wd", tc.weight_decay);
    s.get("momentum", tc.momentum);
    s.get("seed", tc.seed);
    s.get("eval_every", tc.eval_every);
    s.get("eval_batch", tc.eval_batch);
    s.get("eval_split", tc.eval_split);
    s.get("probe_layers", tc.probe_layers);
    s.get("probe_samples", tc.probe_samples);
    s.get("ds_scale", tc.ds_scale);
    s.get("init_lr_divisor", tc.init_lr_divisor);
    if (auto* a = s.sub("augment")) {
      detail::Section as(*a, "train.augment");
      as.get("enabled", tc.augment.enabled);
      as.get("flip_p", tc.augment.flip_p);
      as.get("scale_min", tc.augment.scale_min);
      as.get("scale_max", tc.augment.scale_max);
      as.finish();
    }
    s.finish();
  }
  if (auto* a = root.sub("aux")) {
    detail::Section s(*a, "aux");
    s.get_as("mode", [&](const std::string& v) { c.aux.mode = parse_aux_mode(v); });
    s.get_as("agg", [&](const std::string& v) { c.aux.agg = parse_agg(v); });
    s.get("genotype_path", c.aux.genotype_path);
    s.get("c_aux", c.aux.c_aux);
    s.get("strict_cross_task", c.aux.strict_cross_task);
    s.get("donor_task", c.aux.donor_task);
    s.finish();
  }
  if (auto* se = root.sub("search")) {
    detail::Section s(*se, "search");
    auto& sc = c.search;
    s.get("candidates", sc.candidates);
    s.get("batch", sc.batch);
    s.get("short_iters", sc.short_iters);
    s.get("seed", sc.seed);
    s.get("log_wall_time", sc.log_wall_time);
    if (auto* p = s.sub("ppo")) {
      detail::Section ps(*p, "search.ppo");
      ps.get("clip", sc.ppo.clip);
      ps.get("epochs", sc.ppo.epochs);
      ps.get("entropy_coef", sc.ppo.entropy_coef);
      ps.get("lr", sc.ppo.lr);
      ps.get("beta1", sc.ppo.beta1);
      ps.get("beta2", sc.ppo.beta2);
      ps.get("baseline_decay", sc.ppo.baseline_decay);
      ps.finish();
    }
    if (auto* p = s.sub("controller")) {
      detail::Section ps(*p, "search.controller");
      ps.get("embed", sc.controller_embed);
      ps.get("hidden", sc.controller_hidden);
      ps.finish();
    }
    s.finish();
  }
  root.finish();

  if (c.train.iters < 0 || c.train.batch < 1 || c.train.lr0 < 0 || c.train.eval_batch < 1)
    throw ConfigError("train: iters >= 0, batch >= 1, eval_batch >= 1 and lr0 >= 0 required");
  if (c.search.candidates < 0 || c.search.batch < 1 || c.search.short_iters < 0 || c.search.ppo.epochs < 1)
    throw ConfigError("search: candidates >= 0, batch >= 1, short_iters >= 0, ppo.epochs >= 1 required");
  if (c.model.tasks.empty()) throw ConfigError("model.tasks must not be empty");
  std::set<int> ids;
  for (const auto& t : c.model.tasks)
    if (t.id < 1 || t.id > 9 || !ids.insert(t.id).second) throw ConfigError("task ids must be distinct and in 1..9");
  return c;
}

inline Config parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json_doc(j);
}

inline nlohmann::json config_to_json_doc(const Config& c) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : c.model.tasks) tasks.push_back({{"id", t.id}, {"kind", kind_name(t.kind)}, {"classes", t.classes}});
  const auto& tc = c.train;
  const auto& sc = c.search;
  return {
      {"output_dir", c.output_dir},
      {"data",
       {{"dir", c.data_dir},
        {"seed", c.gen.seed},
        {"n", c.gen.n},
        {"height", c.gen.height},
        {"width", c.gen.width},
        {"classes", c.gen.classes},
        {"val_fraction", c.gen.val_fraction},
        {"test_fraction", c.gen.test_fraction},
        {"meta_val_fraction", c.gen.meta_val_fraction}}},
      {"model",
       {{"variant", variant_name(c.model.variant)},
        {"tasks", tasks},
        {"stem_channels", c.model.stem_channels},
        {"tap_channels", c.model.stage_channels},
        {"decoder_channels", c.model.decoder_channels},
        {"aspp_branch", c.model.aspp_branch}}},
      {"train",
       {{"iters", tc.iters},
        {"lr0", tc.lr0},
        {"batch", tc.batch},
        {"wd", tc.weight_decay},
        {"momentum", tc.momentum},
        {"seed", tc.seed},
        {"eval_every", tc.eval_every},
        {"eval_batch", tc.eval_batch},
        {"eval_split", tc.eval_split},
        {"probe_layers", tc.probe_layers},
        {"probe_samples", tc.probe_samples},
        {"ds_scale", tc.ds_scale},
        {"init_lr_divisor", tc.init_lr_divisor},
        {"augment",
         {{"enabled", tc.augment.enabled},
          {"flip_p", tc.augment.flip_p},
          {"scale_min", tc.augment.scale_min},
          {"scale_max", tc.augment.scale_max}}}}},
      {"aux",
       {{"mode", aux_mode_name(c.aux.mode)},
        {"agg", std::string(kAggNames[static_cast<std::size_t>(c.aux.agg)])},
        {"genotype_path", c.aux.genotype_path},
        {"c_aux", c.aux.c_aux},
        {"strict_cross_task", c.aux.strict_cross_task},
        {"donor_task", c.aux.donor_task}}},
      {"search",
       {{"candidates", sc.candidates},
        {"batch", sc.batch},
        {"short_iters", sc.short_iters},
        {"seed", sc.seed},
        {"log_wall_time", sc.log_wall_time},
        {"ppo",
         {{"clip", sc.ppo.clip},
          {"epochs", sc.ppo.epochs},
          {"entropy_coef", sc.ppo.entropy_coef},
          {"lr", sc.ppo.lr},
          {"beta1", sc.ppo.beta1},
          {"beta2", sc.ppo.beta2},
          {"baseline_decay", sc.ppo.baseline_decay}}},
        {"controller", {{"embed", sc.controller_embed}, {"hidden", sc.controller_hidden}}}}},
  };
}

}  // namespace auxnas
