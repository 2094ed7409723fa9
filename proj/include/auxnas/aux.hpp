#pragma once

#include <string>
#include <utility>
#include <vector>

#include "auxnas/genotype.hpp"
#include "auxnas/mtl_net.hpp"

namespace auxnas {

struct AuxOptions {
  int c_aux = 16;
  bool strict_cross_task = false;  // forbid references to earlier cells of the same task
};

enum class AuxKind { none, basic, genotype };

// What to attach to a model: nothing, basic chains (one per listed task id),
// or a searched genotype covering every model task in list order.
struct AuxSpec {
  AuxKind kind = AuxKind::none;
  AggOp agg = AggOp::sum;
  std::vector<int> basic_tasks;
  int chain_length = 0;  // basic chain taps used; 0 means all taps
  Genotype genotype;
  AuxOptions opt;

  static AuxSpec none() { return {}; }
  static AuxSpec basic(std::vector<int> task_ids, AggOp agg = AggOp::sum) {
    AuxSpec s;
    s.kind = AuxKind::basic;
    s.basic_tasks = std::move(task_ids);
    s.agg = agg;
    return s;
  }
  static AuxSpec searched(Genotype g, AuxOptions opt = {}) {
    AuxSpec s;
    s.kind = AuxKind::genotype;
    s.genotype = std::move(g);
    s.opt = opt;
    return s;
  }
};

template <class T>
struct AuxPrediction {
  int task_id;
  Var<T> pred;
};

namespace auxpath {
inline std::string task(int id) { return "aux.t" + std::to_string(id); }
inline std::string adaptor(int id, int p) { return task(id) + ".ad" + std::to_string(p); }
inline std::string aggregator(int id, int p) { return task(id) + ".agg" + std::to_string(p); }
inline std::string cell(int id, int p) { return task(id) + ".c" + std::to_string(p); }
inline std::string head(int id) { return task(id) + ".head"; }
}  // namespace auxpath

namespace detail {

template <class T>
Var<T> align(Var<T> x, int h, int w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  return ops::bilinear_resize(x, h, w);
}

inline int chain_taps(const AuxSpec& s) {
  const int P = s.chain_length > 0 ? s.chain_length : kNumTaps;
  if (P > kNumTaps) throw ConfigError("aux chain longer than the number of taps");
  return P;
}

}  // namespace detail

// Basic chain for one task: h_0 = D(O_1); h_p = agg(h_{p-1}, D(O_{p+1})).
template <class T>
void build_basic_aux(ParamSet<T>& ps, const TaskSpec& task, const std::vector<int>& tap_channels, int P, AggOp agg,
                     const AuxOptions& opt, Rng& rng) {
  if (P < 1) throw ConfigError("basic aux chain needs P >= 1");
  const Tag tag = Tag::aux_of(task.id);
  for (int p = 0; p < P; ++p)
    layers::init_basic_adaptor(ps, auxpath::adaptor(task.id, p), tap_channels.at(static_cast<std::size_t>(p)), opt.c_aux,
                               tag, rng);
  for (int p = 1; p < P; ++p) layers::init_aggregate(ps, auxpath::aggregator(task.id, p), agg, opt.c_aux, tag, rng);
  layers::init_head(ps, auxpath::head(task.id), opt.c_aux, task.channels(), tag, rng);
}

// Instantiates every cell of g in generation order. tasks[i] pairs with
// g.tasks[i]. Validates availability and skip_connect channel counts first,
// so nothing is registered for an invalid genotype.
template <class T>
void build_from_genotype(ParamSet<T>& ps, const Genotype& g, const std::vector<TaskSpec>& tasks,
                         const std::vector<int>& tap_channels, const AuxOptions& opt, Rng& rng) {
  if (g.T() != static_cast<int>(tasks.size()))
    throw GenotypeError("genotype covers " + std::to_string(g.T()) + " tasks, model has " + std::to_string(tasks.size()));
  check_availability(g, opt.strict_cross_task);
  check_channels(g, tap_channels, opt.c_aux);
  for (int t = 0; t < g.T(); ++t) {
    const auto& task = tasks[static_cast<std::size_t>(t)];
    const Tag tag = Tag::aux_of(task.id);
    for (int p = 0; p < g.P; ++p) {
      const auto& c = g.tasks[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
      const std::string base = auxpath::cell(task.id, p);
      auto in_ch = [&](int loc) { return loc < g.P ? tap_channels[static_cast<std::size_t>(loc)] : opt.c_aux; };
      layers::init_adaptor(ps, base + ".op1", c.op1, in_ch(c.in1), opt.c_aux, tag, rng);
      layers::init_adaptor(ps, base + ".op2", c.op2, in_ch(c.in2), opt.c_aux, tag, rng);
      layers::init_aggregate(ps, base + ".agg", c.agg, opt.c_aux, tag, rng);
    }
    layers::init_head(ps, auxpath::head(task.id), opt.c_aux, task.channels(), tag, rng);
  }
}

template <class T>
void init_aux(ParamSet<T>& ps, const AuxSpec& spec, const ModelConfig& cfg, Rng& rng) {
  std::vector<int> taps(cfg.stage_channels.begin(), cfg.stage_channels.end());
  switch (spec.kind) {
    case AuxKind::none: return;
    case AuxKind::basic:
      for (int id : spec.basic_tasks)
        build_basic_aux(ps, cfg.task(id), taps, detail::chain_taps(spec), spec.agg, spec.opt, rng);
      return;
    case AuxKind::genotype: build_from_genotype(ps, spec.genotype, cfg.tasks, taps, spec.opt, rng); return;
  }
}

template <class T>
Var<T> aux_head(Ctx<T>& c, const TaskSpec& task, Var<T> h, const ModelConfig& cfg) {
  return finish_prediction(task, layers::head(c, auxpath::head(task.id), h, cfg.height, cfg.width));
}

template <class T>
Var<T> basic_aux_forward(Ctx<T>& c, const TaskSpec& task, const std::vector<Var<T>>& taps, int P, AggOp agg,
                         const AuxOptions& opt, const ModelConfig& cfg) {
  const int H = taps[0].dim(2), W = taps[0].dim(3);
  auto adapt = [&](int p) {
    return detail::align(layers::basic_adaptor(c, auxpath::adaptor(task.id, p), taps[static_cast<std::size_t>(p)], opt.c_aux),
                         H, W);
  };
  Var<T> h = adapt(0);
  for (int p = 1; p < P; ++p) h = layers::aggregate(c, auxpath::aggregator(task.id, p), agg, h, adapt(p));
  ops::check_finite(h, auxpath::task(task.id));
  return aux_head(c, task, h, cfg);
}

// Cells run in generation order; every cell output joins the shared location
// list. Each task's head reads that task's last cell.
template <class T>
std::vector<AuxPrediction<T>> genotype_forward(Ctx<T>& c, const Genotype& g, const std::vector<Var<T>>& taps,
                                               const AuxOptions& opt, const ModelConfig& cfg) {
  const int H = taps[0].dim(2), W = taps[0].dim(3);
  std::vector<Var<T>> loc(taps.begin(), taps.end());
  std::vector<AuxPrediction<T>> out;
  for (int t = 0; t < g.T(); ++t) {
    const auto& task = cfg.tasks[static_cast<std::size_t>(t)];
    for (int p = 0; p < g.P; ++p) {
      const auto& cell = g.tasks[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
      const std::string base = auxpath::cell(task.id, p);
      auto a = detail::align(layers::apply_adaptor(c, base + ".op1", cell.op1, loc.at(static_cast<std::size_t>(cell.in1)),
                                                   opt.c_aux),
                             H, W);
      auto b = detail::align(layers::apply_adaptor(c, base + ".op2", cell.op2, loc.at(static_cast<std::size_t>(cell.in2)),
                                                   opt.c_aux),
                             H, W);
      auto h = layers::aggregate(c, base + ".agg", cell.agg, a, b);
      ops::check_finite(h, base);
      loc.push_back(h);
    }
    out.push_back({task.id, aux_head(c, task, loc.back(), cfg)});
  }
  return out;
}

template <class T>
std::vector<AuxPrediction<T>> aux_forward(Ctx<T>& c, const AuxSpec& spec, const ModelConfig& cfg,
                                          const std::vector<Var<T>>& taps) {
  std::vector<AuxPrediction<T>> out;
  switch (spec.kind) {
    case AuxKind::none: break;
    case AuxKind::basic:
      for (int id : spec.basic_tasks)
        out.push_back({id, basic_aux_forward(c, cfg.task(id), taps, detail::chain_taps(spec), spec.agg, spec.opt, cfg)});
      break;
    case AuxKind::genotype: out = genotype_forward(c, spec.genotype, taps, spec.opt, cfg); break;
  }
  return out;
}

inline bool is_aux(const Tag& t) { return t.group == Group::aux; }

// Drops every aux-tagged parameter. The main path never reads them, so the
// stripped model computes identical predictions.
template <class T>
MtlModel<T> strip_aux(const MtlModel<T>& m) {
  return {m.cfg, m.params.filter([](const std::string&, const Param<T>& p) { return !is_aux(p.tag); })};
}

}  // namespace auxnas
