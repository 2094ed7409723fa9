#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "auxnas/config.hpp"

namespace auxnas {

namespace exit_code {
inline constexpr int ok = 0, config = 2, io = 3, diverged = 4;
}

// Maps library errors to exit codes and prints the message.
template <class Fn>
int guarded(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const GenotypeError& e) {
    err << "genotype error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const CodecError& e) {
    err << "genotype error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return exit_code::diverged;
  }
}

inline int threads_from_env() {
  const char* v = std::getenv("AUXNAS_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("AUXNAS_THREADS must be a positive integer");
  return static_cast<int>(n);
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

inline void write_resolved(const Config& c, const std::filesystem::path& dir) {
  ensure_dir(dir);
  io::write_file(dir / "config.resolved.json", config_to_json_doc(c).dump(2) + "\n");
}

inline data::Dataset load_data(const Config& c) {
  if (!std::filesystem::exists(std::filesystem::path(c.data_dir) / "manifest.json"))
    throw IoError("no dataset at " + c.data_dir + " (run gen-data first)");
  return data::load_dataset(c.data_dir);
}

// Model and augmentation sizes follow the dataset.
inline RunConfig run_config(const Config& c, const data::Dataset& ds) {
  RunConfig rc;
  rc.model = c.model;
  rc.model.height = ds.height;
  rc.model.width = ds.width;
  for (const auto& t : rc.model.tasks)
    if (t.kind == TaskKind::segmentation && t.classes != ds.classes)
      throw ConfigError("task t" + std::to_string(t.id) + " has " + std::to_string(t.classes) + " classes, dataset has " +
                        std::to_string(ds.classes));
  rc.train = c.train;
  rc.train.augment.crop_h = ds.height;
  rc.train.augment.crop_w = ds.width;
  rc.aux.c_aux = c.aux.c_aux;
  rc.aux.strict_cross_task = c.aux.strict_cross_task;
  rc.aux_agg = c.aux.agg;
  return rc;
}

// Fills the aux mode from the strategy, or rejects a mismatch.
inline void resolve_aux_mode(Config& c, const Strategy& s) {
  const AuxMode want = aux_mode_of(s);
  if (c.aux.mode == AuxMode::auto_) c.aux.mode = want;
  if (c.aux.mode != want)
    throw ConfigError("aux.mode " + aux_mode_name(c.aux.mode) + " does not match strategy " + s.name() + " (needs " +
                      aux_mode_name(want) + ")");
}

inline int donor_task_for(const Config& c, const Strategy& s) {
  if (s.kind == StrategyKind::prior) return s.task;
  if (s.kind != StrategyKind::auxi_single) return 0;
  if (c.aux.donor_task != 0) {
    (void)c.model.task(c.aux.donor_task);
    return c.aux.donor_task;
  }
  for (const auto& t : c.model.tasks)
    if (t.id != s.task) return t.id;
  throw ConfigError(s.name() + " needs a second task to initialise from");
}

// ---------------------------------------------------------------------------
// gen-data

inline int cmd_gen_data(const data::GenConfig& g, const std::filesystem::path& out) {
  data::gen_synthetic(g, out);
  return exit_code::ok;
}

// ---------------------------------------------------------------------------
// train

inline RunResult<float> train_once(Config c, const Strategy& s, const data::Dataset& ds,
                                   const std::filesystem::path& init_ckpt, const std::filesystem::path& out) {
  resolve_aux_mode(c, s);
  (void)c.model.task(s.task == 0 ? c.model.tasks.front().id : s.task);
  RunConfig rc = run_config(c, ds);
  rc.init_checkpoint = init_ckpt;
  rc.output_dir = out;
  if (s.kind == StrategyKind::auxi_nas) {
    if (c.aux.genotype_path.empty()) throw ConfigError("auxi-nas needs aux.genotype_path");
    rc.genotype = read_genotype(c.aux.genotype_path, c.aux.strict_cross_task);
  }
  c.output_dir = out.string();
  write_resolved(c, out);
  return run_strategy<float>(s, ds, rc);
}

inline int cmd_train(const Config& c, const std::string& strategy, const std::filesystem::path& init_ckpt,
                     std::ostream& log = std::cout) {
  const Strategy s = Strategy::parse(strategy);
  if (s.needs_init_checkpoint() && init_ckpt.empty())
    throw ConfigError(s.name() + " requires --init-ckpt (a single-task checkpoint)");
  const auto ds = load_data(c);
  auto r = train_once(c, s, ds, init_ckpt, c.output_dir);
  if (r.record.diverged) {
    log << s.name() << ": diverged at " << r.record.divergence << "\n";
    return exit_code::diverged;
  }
  if (const auto* e = r.record.final_eval())
    for (const auto& m : e->tasks)
      log << s.name() << " t" << m.task_id << " miou=" << fmt_num(m.miou) << " pixacc=" << fmt_num(m.pixacc)
          << " rel=" << fmt_num(m.rel) << " rms=" << fmt_num(m.rms) << " angle=" << fmt_num(m.angle) << "\n";
  return exit_code::ok;
}

// ---------------------------------------------------------------------------
// eval

inline int cmd_eval(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir, const std::string& split,
                    std::ostream& out = std::cout) {
  auto model = model_from_checkpoint<float>(read_checkpoint(ckpt));
  const auto ds = data::load_dataset(data_dir);
  if (ds.height != model.cfg.height || ds.width != model.cfg.width)
    throw ConfigError("checkpoint input size differs from the dataset");
  RunRecord rec;
  rec.evals.push_back({0, evaluate(model, ds, ds.split(split))});
  out << eval_csv(rec);
  return exit_code::ok;
}

// ---------------------------------------------------------------------------
// search

inline int cmd_search(const Config& c, std::ostream& log = std::cout) {
  const auto ds = load_data(c);
  Config rc_cfg = c;
  rc_cfg.aux.mode = AuxMode::genotype;
  const RunConfig rc = run_config(rc_cfg, ds);
  SearchConfig sc;
  sc.candidates = c.search.candidates;
  sc.batch = c.search.batch;
  sc.ppo = c.search.ppo;
  sc.controller.embed = c.search.controller_embed;
  sc.controller.hidden = c.search.controller_hidden;
  sc.candidate = default_candidate_config(rc.model);
  sc.candidate.train = rc.train;
  sc.candidate.train.iters = c.search.short_iters;
  sc.candidate.train.eval_every = 0;
  sc.candidate.train.train_split = "meta_train";
  sc.candidate.train.eval_split = "meta_val";
  sc.candidate.aux = rc.aux;
  sc.seed = c.search.seed;
  sc.threads = threads_from_env();
  sc.log_wall_time = c.search.log_wall_time;
  if (c.search.candidates > 0 && (ds.splits.meta_train.empty() || ds.splits.meta_val.empty()))
    throw DataError("dataset has no meta_train/meta_val split");

  const std::filesystem::path out = c.output_dir;
  write_resolved(rc_cfg, out);
  std::string lines;
  auto res = search_loop(sc, ds, [&](const RewardRecord& r) {
    lines += record_json(r).dump() + "\n";
    log << "candidate " << r.candidate_id << " reward " << fmt_num(r.reward) << (r.valid ? "" : " (invalid)")
        << (r.diverged ? " (diverged)" : "") << "\n";
  });
  io::write_file(out / "search.log", lines);
  io::write_file(out / "opstats.csv", opstats_csv(res.opstats));
  if (res.best) {
    write_genotype(out / "best.genotype.json", *res.best);
    log << "best candidate " << res.best_candidate << " reward " << fmt_num(res.best_reward) << "\n";
  }
  return res.all_diverged() ? exit_code::diverged : exit_code::ok;
}

// ---------------------------------------------------------------------------
// compare

struct CompareCell {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::vector<TaskMetrics> metrics;
  int code = exit_code::ok;
};

inline std::vector<std::string> metric_columns(const ModelConfig& m) {
  std::vector<std::string> cols;
  for (const auto& t : m.tasks) {
    const std::string p = "t" + std::to_string(t.id) + "_";
    switch (t.kind) {
      case TaskKind::segmentation: cols.push_back(p + "miou"), cols.push_back(p + "pixacc"); break;
      case TaskKind::depth: cols.push_back(p + "rel"), cols.push_back(p + "rms"); break;
      case TaskKind::normal: cols.push_back(p + "angle"); break;
    }
  }
  return cols;
}

// Values in metric_columns order; NaN where the cell has no value.
inline std::vector<double> metric_values(const ModelConfig& m, const std::vector<TaskMetrics>& ms) {
  std::vector<double> out;
  for (const auto& t : m.tasks) {
    const TaskMetrics* hit = nullptr;
    for (const auto& x : ms)
      if (x.task_id == t.id) hit = &x;
    switch (t.kind) {
      case TaskKind::segmentation:
        out.push_back(hit ? hit->miou : NAN), out.push_back(hit ? hit->pixacc : NAN);
        break;
      case TaskKind::depth: out.push_back(hit ? hit->rel : NAN), out.push_back(hit ? hit->rms : NAN); break;
      case TaskKind::normal: out.push_back(hit ? hit->angle : NAN); break;
    }
  }
  return out;
}

// One row per (strategy, seed), then one summary row per strategy with the
// per-column mean over seeds that produced a value.
inline std::string compare_table(const ModelConfig& m, const std::vector<std::string>& strategies,
                                 const std::vector<CompareCell>& cells) {
  const auto cols = metric_columns(m);
  std::string out = "strategy,seed,status";
  for (const auto& c : cols) out += "," + c;
  out += "\n";
  for (const auto& cell : cells) {
    out += cell.strategy + "," + std::to_string(cell.seed) + "," + cell.status;
    for (double v : metric_values(m, cell.metrics)) out += "," + fmt_num(v);
    out += "\n";
  }
  for (const auto& s : strategies) {
    std::vector<double> sum(cols.size(), 0.0);
    std::vector<int> n(cols.size(), 0);
    int total = 0, ok = 0;
    for (const auto& cell : cells) {
      if (cell.strategy != s) continue;
      ++total;
      ok += cell.status == "ok";
      const auto v = metric_values(m, cell.metrics);
      for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isnan(v[i])) sum[i] += v[i], ++n[i];
    }
    out += s + ",mean," + (ok == total ? std::string("ok") : "partial " + std::to_string(ok) + "/" + std::to_string(total));
    for (std::size_t i = 0; i < cols.size(); ++i) out += "," + (n[i] ? fmt_num(sum[i] / n[i]) : std::string());
    out += "\n";
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_list(s)) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad seed: " + tok);
    }
  }
  if (out.empty()) throw ConfigError("no seeds given");
  return out;
}

struct CompareResult {
  std::vector<CompareCell> cells;
  std::string table;
  int code = exit_code::ok;
};

// Runs every (strategy, seed) cell with the aux mode implied by each
// strategy; single-task donors needed by prior-tN and
// auxi-tN are trained once per (task, seed) under <out>/donors.
inline CompareResult run_compare(const Config& c, const std::vector<std::string>& strategies,
                                 const std::vector<std::uint64_t>& seeds, std::ostream& log = std::cout) {
  if (strategies.empty()) throw ConfigError("no strategies given");
  std::vector<Strategy> parsed;
  for (const auto& s : strategies) {
    parsed.push_back(Strategy::parse(s));
    Config probe = c;
    probe.aux.mode = AuxMode::auto_;
    resolve_aux_mode(probe, parsed.back());
    (void)donor_task_for(c, parsed.back());
    if (parsed.back().task) (void)c.model.task(parsed.back().task);
    if (parsed.back().kind == StrategyKind::auxi_nas) {
      if (c.aux.genotype_path.empty()) throw ConfigError("auxi-nas needs aux.genotype_path");
      (void)read_genotype(c.aux.genotype_path, c.aux.strict_cross_task);
    }
  }
  const auto ds = load_data(c);
  const std::filesystem::path out = c.output_dir;
  ensure_dir(out);
  write_resolved(c, out);
  const int threads = threads_from_env();
  std::mutex log_mu;
  auto say = [&](const std::string& s) {
    std::lock_guard<std::mutex> lock(log_mu);
    log << s << "\n";
  };

  // donors
  std::vector<std::pair<int, std::uint64_t>> donors;
  for (const auto& s : parsed)
    if (int t = donor_task_for(c, s))
      for (auto seed : seeds)
        if (std::find(donors.begin(), donors.end(), std::pair{t, seed}) == donors.end()) donors.emplace_back(t, seed);
  auto donor_dir = [&](int t, std::uint64_t seed) {
    return out / "donors" / ("single-t" + std::to_string(t) + "-s" + std::to_string(seed));
  };
  std::vector<int> donor_codes(donors.size(), exit_code::ok);
  parallel_for(static_cast<int>(donors.size()), threads, [&](int i) {
    const auto [t, seed] = donors[static_cast<std::size_t>(i)];
    Config dc = c;
    dc.train.seed = seed;
    dc.aux.mode = AuxMode::auto_;
    auto r = train_once(dc, Strategy{StrategyKind::single, t}, ds, {}, donor_dir(t, seed));
    donor_codes[static_cast<std::size_t>(i)] = r.record.diverged ? exit_code::diverged : exit_code::ok;
    say("donor single-t" + std::to_string(t) + " seed " + std::to_string(seed) + (r.record.diverged ? " diverged" : " done"));
  });
  auto donor_ok = [&](int t, std::uint64_t seed) {
    for (std::size_t i = 0; i < donors.size(); ++i)
      if (donors[i] == std::pair{t, seed}) return donor_codes[i] == exit_code::ok;
    return false;
  };

  CompareResult res;
  for (const auto& s : parsed)
    for (auto seed : seeds) {
      CompareCell cell;
      cell.strategy = s.name();
      cell.seed = seed;
      res.cells.push_back(std::move(cell));
    }
  parallel_for(static_cast<int>(res.cells.size()), threads, [&](int i) {
    auto& cell = res.cells[static_cast<std::size_t>(i)];
    const Strategy s = parsed[static_cast<std::size_t>(i) / seeds.size()];
    Config cc = c;
    cc.train.seed = cell.seed;
    cc.aux.mode = AuxMode::auto_;
    std::filesystem::path init;
    if (int t = donor_task_for(c, s)) {
      if (!donor_ok(t, cell.seed)) {
        cell.status = "donor-diverged";
        cell.code = exit_code::diverged;
        return;
      }
      init = donor_dir(t, cell.seed) / "model.ckpt";
    }
    auto r = train_once(cc, s, ds, init, out / "cells" / (cell.strategy + "-s" + std::to_string(cell.seed)));
    if (r.record.diverged) {
      cell.status = "diverged";
      cell.code = exit_code::diverged;
    } else if (const auto* e = r.record.final_eval()) {
      cell.metrics = e->tasks;
    }
    say(cell.strategy + " seed " + std::to_string(cell.seed) + " " + cell.status);
  });
  for (const auto& cell : res.cells) res.code = std::max(res.code, cell.code);
  ModelConfig m = c.model;
  res.table = compare_table(m, strategies, res.cells);
  io::write_file(out / "table.csv", res.table);
  return res;
}

inline int cmd_compare(const Config& c, const std::string& strategies, const std::string& seeds,
                       std::ostream& log = std::cout) {
  return run_compare(c, split_list(strategies), parse_seeds(seeds), log).code;
}

}  // namespace auxnas
