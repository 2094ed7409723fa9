#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "auxnas/aux.hpp"
#include "auxnas/data.hpp"
#include "auxnas/losses.hpp"
#include "auxnas/metrics.hpp"
#include "auxnas/optim.hpp"

namespace auxnas {

// ---------------------------------------------------------------------------
// Strategies

enum class StrategyKind { single, joint, prior, deep_supervision, kendall, auxi_single, auxi_both, auxi_nas };

struct Strategy {
  StrategyKind kind = StrategyKind::joint;
  int task = 0;  // single / prior / ds / auxi-single

  bool needs_init_checkpoint() const { return kind == StrategyKind::prior || kind == StrategyKind::auxi_single; }
  bool attaches_aux() const {
    return kind == StrategyKind::auxi_single || kind == StrategyKind::auxi_both || kind == StrategyKind::auxi_nas;
  }

  std::string name() const {
    const std::string t = "t" + std::to_string(task);
    switch (kind) {
      case StrategyKind::single: return "single-" + t;
      case StrategyKind::joint: return "joint";
      case StrategyKind::prior: return "prior-" + t;
      case StrategyKind::deep_supervision: return "ds-" + t;
      case StrategyKind::kendall: return "kendall";
      case StrategyKind::auxi_single: return "auxi-" + t;
      case StrategyKind::auxi_both: return "auxi-both";
      case StrategyKind::auxi_nas: return "auxi-nas";
    }
    return "?";
  }

  static Strategy parse(const std::string& s) {
    if (s == "joint") return {StrategyKind::joint, 0};
    if (s == "kendall") return {StrategyKind::kendall, 0};
    if (s == "auxi-both") return {StrategyKind::auxi_both, 0};
    if (s == "auxi-nas") return {StrategyKind::auxi_nas, 0};
    for (auto [prefix, kind] : {std::pair{"single-t", StrategyKind::single}, std::pair{"prior-t", StrategyKind::prior},
                                std::pair{"ds-t", StrategyKind::deep_supervision},
                                std::pair{"auxi-t", StrategyKind::auxi_single}}) {
      const std::string p = prefix;
      if (s.rfind(p, 0) == 0 && s.size() == p.size() + 1 && s.back() >= '1' && s.back() <= '9')
        return {kind, s.back() - '0'};
    }
    throw ConfigError("unknown strategy: " + s);
  }
};

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int iters = 2000;
  double lr0 = 0.01;
  int batch = 12;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int eval_every = 500;
  int eval_batch = 32;
  std::string eval_split = "val";
  std::string train_split = "train";
  data::AugmentConfig augment;
  std::vector<std::string> probe_layers = {"enc.s1.conv1.conv.w", "enc.s2.conv1.conv.w", "enc.s3.conv1.conv.w"};
  int probe_samples = 64;
  double ds_scale = 0.1;
  double init_lr_divisor = 10.0;  // prior and single-task auxi runs
};

struct RunConfig {
  ModelConfig model;  // full task list; single-tN keeps only task N
  TrainConfig train;
  AuxOptions aux;
  AggOp aux_agg = AggOp::sum;
  std::optional<Genotype> genotype;  // auxi-nas
  std::filesystem::path init_checkpoint;
  std::filesystem::path output_dir;  // empty: nothing written
};

inline double initial_lr(const Strategy& s, const TrainConfig& t) {
  return s.needs_init_checkpoint() ? t.lr0 / t.init_lr_divisor : t.lr0;
}

inline ModelConfig model_for(const Strategy& s, const ModelConfig& base) {
  ModelConfig m = base;
  if (s.kind == StrategyKind::single) m.tasks = {base.task(s.task)};
  else if (s.task != 0) (void)base.task(s.task);
  return m;
}

// Aux modules attached by a strategy; deep-supervision heads are handled
// separately because they read single taps.
inline AuxSpec aux_for(const Strategy& s, const RunConfig& rc) {
  AuxSpec spec;
  switch (s.kind) {
    case StrategyKind::auxi_single: spec = AuxSpec::basic({s.task}, rc.aux_agg); break;
    case StrategyKind::auxi_both: {
      std::vector<int> ids;
      for (const auto& t : rc.model.tasks) ids.push_back(t.id);
      spec = AuxSpec::basic(ids, rc.aux_agg);
      break;
    }
    case StrategyKind::auxi_nas:
      if (!rc.genotype) throw ConfigError("auxi-nas needs a genotype");
      spec = AuxSpec::searched(*rc.genotype);
      break;
    default: break;
  }
  spec.opt = rc.aux;
  return spec;
}

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveSpec {
  AuxSpec aux;
  bool kendall = false;
  int ds_task = 0;  // deep supervision for this task id (0 = off)
  double ds_scale = 0.1;
};

enum class ObjectivePart { all, main_only, aux_only };

template <class T>
struct TaskTerm {
  int task_id;
  Var<T> loss;
};

template <class T>
struct Objective {
  Var<T> total;
  std::vector<TaskTerm<T>> main, aux, ds;
  std::vector<Var<T>> taps;
};

inline std::string ds_head(int task_id, int p) { return "ds.t" + std::to_string(task_id) + ".p" + std::to_string(p); }
inline std::string kendall_param(int task_id) { return "kendall.t" + std::to_string(task_id); }

template <class T>
void init_deep_supervision(ParamSet<T>& ps, const ModelConfig& cfg, int task_id, Rng& rng) {
  const auto& task = cfg.task(task_id);
  for (int p = 0; p < kNumTaps; ++p)
    layers::init_head(ps, ds_head(task_id, p), cfg.stage_channels[static_cast<std::size_t>(p)], task.channels(),
                      Tag::aux_of(task_id), rng);
}

template <class T>
ParamSet<T> init_kendall(const ModelConfig& cfg) {
  ParamSet<T> ps;
  for (const auto& t : cfg.tasks) ps.add(kendall_param(t.id), Tensor<T>(Shape{1}), Tag::task_of(t.id));
  return ps;
}

namespace detail {
template <class T>
Var<T> accumulate(Var<T> acc, Var<T> x) {
  return acc.valid() ? ops::add(acc, x) : x;
}
}  // namespace detail

// Joint loss with unit task weights, plus (depending on spec) Kendall
// weighting, the aux losses and 0.1-scaled deep-supervision losses. `part`
// restricts the total to main or aux terms for decomposition checks.
template <class T>
Objective<T> compute_objective(Ctx<T>& c, const MtlModel<T>& model, const ObjectiveSpec& spec, ParamSet<T>* kendall,
                               const Tensor<T>& images, const Targets<T>& y, ObjectivePart part = ObjectivePart::all) {
  Objective<T> obj;
  auto out = forward_main(c, model, c.tape.constant(images));
  obj.taps = out.taps;
  const bool want_main = part != ObjectivePart::aux_only, want_aux = part != ObjectivePart::main_only;
  Var<T> total;
  for (std::size_t i = 0; i < model.cfg.tasks.size(); ++i) {
    const auto& task = model.cfg.tasks[i];
    auto l = task_loss(task, out.preds[i], y);
    obj.main.push_back({task.id, l});
    if (!want_main) continue;
    if (spec.kendall) {
      if (!kendall) throw ConfigError("kendall weighting needs its log-variance parameters");
      l = kendall_term(l, c.tape.param(kendall->at(kendall_param(task.id))));
    }
    total = detail::accumulate(total, l);
  }
  for (auto& a : aux_forward(c, spec.aux, model.cfg, out.taps)) {
    auto l = task_loss(model.cfg.task(a.task_id), a.pred, y);
    obj.aux.push_back({a.task_id, l});
    if (want_aux) total = detail::accumulate(total, l);
  }
  if (spec.ds_task != 0) {
    const auto& task = model.cfg.task(spec.ds_task);
    Var<T> ds_sum;
    for (int p = 0; p < kNumTaps; ++p) {
      auto pred = finish_prediction(
          task, layers::head(c, ds_head(task.id, p), out.taps[static_cast<std::size_t>(p)], model.cfg.height, model.cfg.width));
      auto l = task_loss(task, pred, y);
      obj.ds.push_back({task.id, l});
      ds_sum = detail::accumulate(ds_sum, l);
    }
    if (want_aux) total = detail::accumulate(total, ops::scale(ds_sum, static_cast<T>(spec.ds_scale)));
  }
  if (!total.valid()) total = c.tape.constant(Tensor<T>(Shape{1}));
  obj.total = total;
  return obj;
}

// ---------------------------------------------------------------------------
// Gradient probe: mean |grad| over a fixed seeded subset of each tracked
// shared layer.

template <class T>
class GradProbe {
 public:
  GradProbe(const ParamSet<T>& ps, std::vector<std::string> layers, std::uint64_t seed, int samples = 64)
      : layers_(std::move(layers)) {
    Rng rng(seed, 0x9e0be);
    for (const auto& path : layers_) {
      if (!ps.contains(path)) throw ConfigError("probe layer not in model: " + path);
      const auto& p = ps.at(path);
      if (p.tag.group != Group::shared) throw ConfigError("probe layer is not shared: " + path);
      const auto n = static_cast<std::uint32_t>(p.value.size());
      std::vector<std::size_t> idx;
      if (static_cast<std::uint32_t>(samples) >= n) {
        for (std::uint32_t i = 0; i < n; ++i) idx.push_back(i);
      } else {
        // partial Fisher-Yates: distinct indices
        std::vector<std::size_t> all(n);
        for (std::uint32_t i = 0; i < n; ++i) all[i] = i;
        for (int k = 0; k < samples; ++k) {
          const auto j = static_cast<std::size_t>(k) + rng.below(n - static_cast<std::uint32_t>(k));
          std::swap(all[static_cast<std::size_t>(k)], all[j]);
        }
        idx.assign(all.begin(), all.begin() + samples);
      }
      subsets_.push_back(std::move(idx));
    }
  }

  const std::vector<std::string>& layers() const { return layers_; }
  const std::vector<std::size_t>& subset(std::size_t i) const { return subsets_[i]; }

  std::vector<double> operator()(const ParamSet<T>& ps) const {
    std::vector<double> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& g = ps.at(layers_[i]).grad;
      double s = 0;
      for (auto k : subsets_[i]) s += g.empty() ? 0.0 : std::abs(static_cast<double>(g[k]));
      out.push_back(subsets_[i].empty() ? 0.0 : s / static_cast<double>(subsets_[i].size()));
    }
    return out;
  }

 private:
  std::vector<std::string> layers_;
  std::vector<std::vector<std::size_t>> subsets_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct TaskMetrics {
  int task_id = 0;
  TaskKind kind = TaskKind::segmentation;
  double miou = NAN, pixacc = NAN, rel = NAN, rms = NAN, angle = NAN;

  // Primary metric per task kind (mIoU, Rel, mean angle).
  double primary() const {
    switch (kind) {
      case TaskKind::segmentation: return miou;
      case TaskKind::depth: return rel;
      case TaskKind::normal: return angle;
    }
    return NAN;
  }
};

template <class T>
std::vector<TaskMetrics> evaluate(MtlModel<T>& model, const data::Dataset& ds, const std::vector<int>& indices,
                                  int batch = 32) {
  std::vector<metrics::SegMeter> seg;
  std::vector<metrics::DepthMeter> dep(model.cfg.tasks.size());
  std::vector<metrics::NormalMeter> nrm(model.cfg.tasks.size());
  for (const auto& t : model.cfg.tasks) seg.emplace_back(t.kind == TaskKind::segmentation ? t.classes : 1, kIgnoreLabel);
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch)) {
    std::vector<data::Sample> ss;
    for (std::size_t i = start; i < std::min(indices.size(), start + static_cast<std::size_t>(batch)); ++i)
      ss.push_back(ds.samples.at(static_cast<std::size_t>(indices[i])));
    auto b = data::collate<T>(ss);
    Tape<T> tape;
    Ctx<T> c{tape, model.params, false};
    auto out = forward_main(c, model, tape.constant(b.images));
    for (std::size_t k = 0; k < model.cfg.tasks.size(); ++k) {
      const auto& pred = out.preds[k].value();
      switch (model.cfg.tasks[k].kind) {
        case TaskKind::segmentation: seg[k].add(metrics::argmax_channels(pred), b.targets.seg); break;
        case TaskKind::depth: dep[k].add(pred.values, b.targets.depth.values); break;
        case TaskKind::normal:
          nrm[k].add(pred.values, b.targets.normal.values, b.size(),
                     static_cast<std::size_t>(b.images.dim(2)) * b.images.dim(3));
          break;
      }
    }
  }
  std::vector<TaskMetrics> res;
  for (std::size_t k = 0; k < model.cfg.tasks.size(); ++k) {
    const auto& t = model.cfg.tasks[k];
    TaskMetrics m{t.id, t.kind};
    switch (t.kind) {
      case TaskKind::segmentation: m.miou = seg[k].miou(), m.pixacc = seg[k].pixel_acc(); break;
      case TaskKind::depth: m.rel = dep[k].rel(), m.rms = dep[k].rms(); break;
      case TaskKind::normal: m.angle = nrm[k].mean_angle(); break;
    }
    res.push_back(m);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Run records

struct IterRecord {
  int iter = 0;
  double lr = 0, loss_total = 0;
  std::vector<double> main, aux, ds, probes;
};

struct EvalRecord {
  int iter = 0;
  std::vector<TaskMetrics> tasks;
};

struct RunRecord {
  std::string strategy;
  std::vector<int> main_tasks, aux_tasks, ds_tasks;
  std::vector<std::string> probe_layers;
  std::vector<IterRecord> iters;
  std::vector<EvalRecord> evals;
  bool diverged = false;
  std::string divergence;

  const EvalRecord* final_eval() const { return evals.empty() ? nullptr : &evals.back(); }
  std::vector<double> cumulative_probe() const {
    std::vector<double> s(probe_layers.size(), 0.0);
    for (const auto& r : iters)
      for (std::size_t i = 0; i < r.probes.size(); ++i) s[i] += r.probes[i];
    return s;
  }
};

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string run_csv(const RunRecord& r) {
  std::string out = "iter,lr,loss_total";
  for (int t : r.main_tasks) out += ",loss_t" + std::to_string(t);
  for (int t : r.aux_tasks) out += ",loss_aux_t" + std::to_string(t);
  for (int t : r.ds_tasks)
    for (int p = 1; p <= kNumTaps; ++p) out += ",loss_ds_t" + std::to_string(t) + "_p" + std::to_string(p);
  for (const auto& l : r.probe_layers) out += ",probe_" + l;
  out += "\n";
  for (const auto& it : r.iters) {
    out += std::to_string(it.iter) + "," + fmt_num(it.lr) + "," + fmt_num(it.loss_total);
    for (const auto* v : {&it.main, &it.aux, &it.ds, &it.probes})
      for (double x : *v) out += "," + fmt_num(x);
    out += "\n";
  }
  return out;
}

inline std::string eval_csv(const RunRecord& r) {
  std::string out = "iter,task,miou,pixacc,rel,rms,angle\n";
  for (const auto& e : r.evals)
    for (const auto& m : e.tasks)
      out += std::to_string(e.iter) + ",t" + std::to_string(m.task_id) + "," + fmt_num(m.miou) + "," + fmt_num(m.pixacc) +
             "," + fmt_num(m.rel) + "," + fmt_num(m.rms) + "," + fmt_num(m.angle) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Training

template <class T>
struct RunResult {
  RunRecord record;
  MtlModel<T> model;  // aux stripped
};

namespace seeds {
inline constexpr std::uint64_t model = 1, sampler = 2, augment = 3, probe = 4, aux = 5;
}

// Loads the donor's shared parameters and every donor task decoder that the
// target model also has.
template <class T>
std::size_t load_donor(MtlModel<T>& m, const Checkpoint& ck) {
  const auto donor_cfg = config_from_json(ck.header);
  if (donor_cfg.variant != m.cfg.variant) throw ConfigError("init checkpoint has a different network variant");
  return load_matching<T>(m.params, ck, [](const std::string&, const Param<T>& p) { return !is_aux(p.tag); });
}

template <class T>
RunResult<T> run_strategy(const Strategy& strategy, const data::Dataset& ds, const RunConfig& rc) {
  const auto& tc = rc.train;
  if (tc.iters < 0 || tc.batch < 1) throw ConfigError("iters must be >= 0 and batch >= 1");
  const ModelConfig mcfg = model_for(strategy, rc.model);
  Rng rng(mix_seed(tc.seed, seeds::model));
  MtlModel<T> model = build_model<T>(mcfg, rng);

  if (strategy.needs_init_checkpoint()) {
    if (rc.init_checkpoint.empty()) throw ConfigError(strategy.name() + " requires an init checkpoint");
    load_donor(model, read_checkpoint(rc.init_checkpoint));
  } else if (!rc.init_checkpoint.empty()) {
    throw ConfigError(strategy.name() + " does not take an init checkpoint");
  }

  ObjectiveSpec ospec;
  ospec.aux = aux_for(strategy, rc);
  ospec.kendall = strategy.kind == StrategyKind::kendall;
  ospec.ds_scale = tc.ds_scale;
  Rng aux_rng(mix_seed(tc.seed, seeds::aux));
  init_aux(model.params, ospec.aux, mcfg, aux_rng);
  if (strategy.kind == StrategyKind::deep_supervision) {
    ospec.ds_task = strategy.task;
    init_deep_supervision(model.params, mcfg, strategy.task, aux_rng);
  }
  ParamSet<T> kendall = ospec.kendall ? init_kendall<T>(mcfg) : ParamSet<T>{};

  RunRecord rec;
  rec.strategy = strategy.name();
  for (const auto& t : mcfg.tasks) rec.main_tasks.push_back(t.id);
  if (ospec.aux.kind == AuxKind::basic) rec.aux_tasks = ospec.aux.basic_tasks;
  if (ospec.aux.kind == AuxKind::genotype)
    for (const auto& t : mcfg.tasks) rec.aux_tasks.push_back(t.id);
  if (ospec.ds_task) rec.ds_tasks = {ospec.ds_task};
  rec.probe_layers = tc.probe_layers;
  GradProbe<T> probe(model.params, tc.probe_layers, mix_seed(tc.seed, seeds::probe), tc.probe_samples);

  data::BatchSampler sampler(ds.split(tc.train_split), mix_seed(tc.seed, seeds::sampler));
  Rng aug_rng(mix_seed(tc.seed, seeds::augment));
  optim::Sgd<T> sgd(tc.momentum, tc.weight_decay), sgd_kendall(tc.momentum, 0.0);
  const double lr0 = initial_lr(strategy, tc);
  const auto& eval_idx = ds.split(tc.eval_split);

  auto do_eval = [&](int iter) {
    if (!eval_idx.empty()) rec.evals.push_back({iter, evaluate(model, ds, eval_idx, tc.eval_batch)});
  };

  for (int it = 0; it < tc.iters; ++it) {
    std::vector<data::Sample> ss;
    for (int i : sampler.next(tc.batch)) {
      const auto& s = ds.samples.at(static_cast<std::size_t>(i));
      ss.push_back(tc.augment.enabled ? data::augment(s, aug_rng, tc.augment) : s);
    }
    auto batch = data::collate<T>(ss);
    IterRecord ir;
    ir.iter = it;
    ir.lr = optim::poly_lr(it, tc.iters, lr0);
    try {
      Tape<T> tape;
      Ctx<T> c{tape, model.params, true};
      auto obj = compute_objective(c, model, ospec, &kendall, batch.images, batch.targets);
      ir.loss_total = obj.total.value()[0];
      for (auto* dst : {&obj.main, &obj.aux, &obj.ds}) {
        auto& v = dst == &obj.main ? ir.main : dst == &obj.aux ? ir.aux : ir.ds;
        for (const auto& term : *dst) v.push_back(term.loss.value()[0]);
      }
      if (!std::isfinite(ir.loss_total)) throw NumericError("loss is not finite");
      model.params.zero_grad();
      kendall.zero_grad();
      tape.backward(obj.total);
      ir.probes = probe(model.params);
      sgd.step(model.params, ir.lr);
      sgd_kendall.step(kendall, ir.lr);
    } catch (const NumericError& e) {
      rec.iters.push_back(ir);
      rec.diverged = true;
      rec.divergence = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
    rec.iters.push_back(std::move(ir));
    if (tc.eval_every > 0 && (it + 1) % tc.eval_every == 0 && it + 1 < tc.iters) do_eval(it + 1);
  }
  if (!rec.diverged) do_eval(tc.iters);

  RunResult<T> res{std::move(rec), strip_aux(model)};
  if (!rc.output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(rc.output_dir, ec);
    if (ec) throw IoError("cannot create " + rc.output_dir.string());
    io::write_file(rc.output_dir / "run.csv", run_csv(res.record));
    io::write_file(rc.output_dir / "eval.csv", eval_csv(res.record));
    write_checkpoint(rc.output_dir / "model.ckpt", res.model, {{"strategy", res.record.strategy}});
  }
  return res;
}

}  // namespace auxnas
