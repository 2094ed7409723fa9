#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "auxnas/ppo.hpp"
#include "auxnas/train.hpp"

namespace auxnas {

// ---------------------------------------------------------------------------
// Reward

struct MetricValue {
  double value = 0;
  bool higher_better = true;
  double scale = 1;  // lower-better values are divided by this before 1/(1+e)
};

struct Reward {
  double value = 0;
  bool diverged = false;
};

// Geometric mean of per-metric scores; higher-better metrics pass through,
// lower-better e becomes 1/(1 + e/scale). Any NaN gives 0 and diverged.
inline Reward compute_reward(const std::vector<MetricValue>& ms) {
  if (ms.empty()) throw ContractError("reward: no metrics");
  double log_sum = 0;
  for (const auto& m : ms) {
    if (std::isnan(m.value)) return {0.0, true};
    const double s = m.higher_better ? m.value : 1.0 / (1.0 + m.value / m.scale);
    if (s < 0 || s > 1) throw ContractError("reward: score outside [0, 1]");
    if (s == 0) return {0.0, false};
    log_sum += std::log(s);
  }
  return {std::exp(log_sum / static_cast<double>(ms.size())), false};
}

// One primary metric per task: mIoU, Rel, mean angle in degrees.
inline std::vector<MetricValue> reward_metrics(const std::vector<TaskMetrics>& tasks) {
  std::vector<MetricValue> out;
  for (const auto& t : tasks) {
    switch (t.kind) {
      case TaskKind::segmentation: out.push_back({t.miou, true, 1}); break;
      case TaskKind::depth: out.push_back({t.rel, false, 1}); break;
      case TaskKind::normal: out.push_back({t.angle, false, 180}); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Candidate evaluation

struct CandidateConfig {
  ModelConfig model;
  TrainConfig train;  // iters is the short budget S
  AuxOptions aux;
};

inline CandidateConfig default_candidate_config(const ModelConfig& model) {
  CandidateConfig c;
  c.model = model;
  c.train.iters = 200;
  c.train.eval_every = 0;
  c.train.train_split = "meta_train";
  c.train.eval_split = "meta_val";
  return c;
}

struct RewardRecord {
  int candidate_id = 0;
  std::uint64_t seed = 0;
  TokenSeq tokens;
  std::optional<Genotype> genotype;  // absent if the tokens do not decode
  bool valid = false;
  std::string invalid_reason;
  std::vector<TaskMetrics> metrics;
  double reward = 0;
  bool diverged = false;
  int iters_used = 0;
  std::optional<double> wall_ms;
};

inline RewardRecord evaluate_candidate(const Genotype& g, const data::Dataset& ds, const CandidateConfig& cc,
                                       std::uint64_t seed, bool record_wall_time = false) {
  const auto t0 = std::chrono::steady_clock::now();
  RewardRecord rec;
  rec.seed = seed;
  rec.genotype = g;
  RunConfig rc;
  rc.model = cc.model;
  rc.train = cc.train;
  rc.train.seed = seed;
  rc.aux = cc.aux;
  rc.genotype = g;
  try {
    if (g.T() != static_cast<int>(cc.model.tasks.size())) throw GenotypeError("genotype task count differs from model");
    check_availability(g, cc.aux.strict_cross_task);
    check_channels(g, {cc.model.stage_channels.begin(), cc.model.stage_channels.end()}, cc.aux.c_aux);
    rec.valid = true;
  } catch (const GenotypeError& e) {
    rec.invalid_reason = e.what();
  }
  if (rec.valid) {
    auto res = run_strategy<float>(Strategy{StrategyKind::auxi_nas, 0}, ds, rc);
    rec.iters_used = static_cast<int>(res.record.iters.size());
    rec.diverged = res.record.diverged;
    if (!rec.diverged && res.record.final_eval()) {
      rec.metrics = res.record.final_eval()->tasks;
      const auto r = compute_reward(reward_metrics(rec.metrics));
      rec.reward = r.value;
      rec.diverged = r.diverged;
    }
    if (rec.diverged) rec.reward = 0;
  }
  if (record_wall_time)
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---------------------------------------------------------------------------
// Search loop

struct SearchConfig {
  int candidates = 200;
  int batch = 16;
  PpoConfig ppo;
  ControllerConfig controller;
  CandidateConfig candidate;
  std::uint64_t seed = 0;
  int threads = 1;
  bool log_wall_time = false;
};

struct OpStats {
  int update = 0;
  int samples = 0;
  std::vector<double> adaptor;  // frequency of each adaptor op among sampled adaptor tokens
  std::vector<double> agg;
};

struct SearchResult {
  std::vector<RewardRecord> log;
  std::vector<OpStats> opstats;
  std::optional<Genotype> best;
  double best_reward = 0;
  int best_candidate = -1;
  bool all_diverged() const {
    return !log.empty() && std::all_of(log.begin(), log.end(), [](const RewardRecord& r) { return r.diverged; });
  }
};

inline OpStats op_stats(int update, const std::vector<TokenSeq>& seqs) {
  OpStats s;
  s.update = update;
  s.samples = static_cast<int>(seqs.size());
  s.adaptor.assign(kNumAdaptorOps, 0.0);
  s.agg.assign(kNumAggOps, 0.0);
  double na = 0, ng = 0;
  for (const auto& seq : seqs)
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto role = role_at(static_cast<int>(i));
      if (role == TokenRole::adaptor) s.adaptor[static_cast<std::size_t>(seq[i])] += 1, na += 1;
      if (role == TokenRole::aggregator) s.agg[static_cast<std::size_t>(seq[i])] += 1, ng += 1;
    }
  for (auto& v : s.adaptor) v = na > 0 ? v / na : 0.0;
  for (auto& v : s.agg) v = ng > 0 ? v / ng : 0.0;
  return s;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// `on_record` sees every record in candidate order as soon as its batch is
// evaluated.
inline SearchResult search_loop(const SearchConfig& cfg, const data::Dataset& ds,
                                 const std::function<void(const RewardRecord&)>& on_record = {}) {
  if (cfg.candidates < 0) throw ConfigError("search: candidates must be >= 0");
  if (cfg.batch < 1) throw ConfigError("search: batch must be >= 1");
  ControllerConfig ccfg = cfg.controller;
  ccfg.T = static_cast<int>(cfg.candidate.model.tasks.size());
  ccfg.P = kNumTaps;
  ccfg.strict = cfg.candidate.aux.strict_cross_task;
  Controller ctrl(ccfg, mix_seed(cfg.seed, 0xc1));
  Ppo ppo(cfg.ppo);
  Rng rng(mix_seed(cfg.seed, 0xc0), 3);
  SearchResult res;
  int next = 0, update = 0;
  while (next < cfg.candidates) {
    const int B = std::min(cfg.batch, cfg.candidates - next);
    std::vector<Controller::Sample> samples;
    for (int b = 0; b < B; ++b) samples.push_back(ctrl.sample(rng));
    std::vector<RewardRecord> recs(static_cast<std::size_t>(B));
    parallel_for(B, cfg.threads, [&](int b) {
      const auto& s = samples[static_cast<std::size_t>(b)];
      const int id = next + b;
      const std::uint64_t seed = mix_seed(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(id));
      RewardRecord r;
      try {
        r = evaluate_candidate(decode_tokens(s.tokens, ccfg.P, ccfg.T, ccfg.strict), ds, cfg.candidate, seed,
                               cfg.log_wall_time);
      } catch (const GenotypeError& e) {
        r.seed = seed;
        r.invalid_reason = e.what();
      }
      r.candidate_id = id;
      r.tokens = s.tokens;
      recs[static_cast<std::size_t>(b)] = std::move(r);
    });
    std::vector<Transition> batch;
    std::vector<TokenSeq> seqs;
    for (int b = 0; b < B; ++b) {
      auto& r = recs[static_cast<std::size_t>(b)];
      batch.push_back({r.tokens, samples[static_cast<std::size_t>(b)].logp, r.reward});
      seqs.push_back(r.tokens);
      if (r.valid && !r.diverged && (res.best_candidate < 0 || r.reward > res.best_reward)) {
        res.best = r.genotype;
        res.best_reward = r.reward;
        res.best_candidate = r.candidate_id;
      }
      if (on_record) on_record(r);
      res.log.push_back(std::move(r));
    }
    res.opstats.push_back(op_stats(update, seqs));
    ppo.update(ctrl, batch);
    ++update;
    next += B;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json metrics_json(const std::vector<TaskMetrics>& ms) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& m : ms) {
    nlohmann::json t;
    switch (m.kind) {
      case TaskKind::segmentation: t = {{"miou", m.miou}, {"pixacc", m.pixacc}}; break;
      case TaskKind::depth: t = {{"rel", m.rel}, {"rms", m.rms}}; break;
      case TaskKind::normal: t = {{"angle", m.angle}}; break;
    }
    j["t" + std::to_string(m.task_id)] = t;
  }
  return j;
}

inline nlohmann::json record_json(const RewardRecord& r) {
  nlohmann::json j = {{"candidate_id", r.candidate_id},
                      {"seed", r.seed},
                      {"tokens", r.tokens},
                      {"genotype", r.genotype ? genotype_to_json(*r.genotype) : nlohmann::json()},
                      {"valid", r.valid},
                      {"metrics", metrics_json(r.metrics)},
                      {"reward", r.reward},
                      {"diverged", r.diverged},
                      {"iters", r.iters_used},
                      {"wall_ms", r.wall_ms ? nlohmann::json(*r.wall_ms) : nlohmann::json()}};
  if (!r.valid) j["invalid_reason"] = r.invalid_reason;
  return j;
}

inline std::string opstats_csv(const std::vector<OpStats>& rows) {
  std::string out = "update,samples";
  for (auto n : kAdaptorNames) out += "," + std::string(n);
  for (auto n : kAggNames) out += "," + std::string(n);
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.update) + "," + std::to_string(r.samples);
    for (double v : r.adaptor) out += "," + fmt_num(v);
    for (double v : r.agg) out += "," + fmt_num(v);
    out += "\n";
  }
  return out;
}

}  // namespace auxnas
