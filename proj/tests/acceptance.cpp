// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "auxnas/commands.hpp"
#include "support/bandit.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracle.hpp"

using namespace auxnas;
using auxnas::testing::check_op;
using auxnas::testing::random_tensor;
namespace fs = std::filesystem;
namespace oracle = auxnas::testing::oracle;

namespace {

ParamSet<double>* const kNoKendall = nullptr;
constexpr double kStep = 1e-5;  // central-difference step

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("auxnas_accept_" + name);
  fs::remove_all(p);
  return p;
}

ModelConfig model_with(std::vector<TaskSpec> tasks, int hw, Variant v = Variant::baseline) {
  ModelConfig m;
  m.tasks = std::move(tasks);
  m.height = m.width = hw;
  m.variant = v;
  return m;
}

Tensor<double> unit_normals(const Shape& s, Rng& rng) {
  auto t = random_tensor(s, rng);
  const std::size_t HW = static_cast<std::size_t>(s[2]) * s[3];
  for (int n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      const std::size_t b = static_cast<std::size_t>(n) * 3 * HW + i;
      const double norm = std::sqrt(t[b] * t[b] + t[b + HW] * t[b + HW] + t[b + 2 * HW] * t[b + 2 * HW]);
      for (int c = 0; c < 3; ++c) t[b + static_cast<std::size_t>(c) * HW] /= norm;
    }
  return t;
}

Targets<double> random_targets(const ModelConfig& m, int N, Rng& rng) {
  Targets<double> y;
  const int H = m.height, W = m.width;
  int K = 2;
  for (const auto& t : m.tasks)
    if (t.kind == TaskKind::segmentation) K = t.classes;
  for (int i = 0; i < N * H * W; ++i)
    y.seg.push_back(rng.bernoulli(0.1) ? kIgnoreLabel : static_cast<int>(rng.below(static_cast<std::uint32_t>(K))));
  y.depth = random_tensor({N, 1, H, W}, rng, 0.5, 3.0);
  y.normal = unit_normals({N, 3, H, W}, rng);
  return y;
}

// A random genotype whose skip connections all meet channel-matching inputs.
Genotype random_valid_genotype(const ModelConfig& m, int c_aux, Rng& rng) {
  const std::vector<int> ch(m.stage_channels.begin(), m.stage_channels.end());
  for (;;) {
    auto g = random_genotype(kNumTaps, static_cast<int>(m.tasks.size()), rng);
    try {
      check_channels(g, ch, c_aux);
      return g;
    } catch (const GenotypeError&) {
    }
  }
}

AuxSpec random_aux(const ModelConfig& m, Rng& rng) {
  if (rng.bernoulli(0.5)) {
    std::vector<int> ids;
    for (const auto& t : m.tasks)
      if (ids.empty() || rng.bernoulli(0.7)) ids.push_back(t.id);
    return AuxSpec::basic(ids, rng.bernoulli(0.5) ? AggOp::sum : AggOp::concat);
  }
  return AuxSpec::searched(random_valid_genotype(m, 16, rng));
}

Variant random_variant(Rng& rng) {
  const Variant all[] = {Variant::baseline, Variant::context, Variant::ushape};
  return all[rng.below(3)];
}

std::vector<TaskSpec> random_tasks(Rng& rng) {
  std::vector<TaskSpec> all = {{1, TaskKind::segmentation, 2 + static_cast<int>(rng.below(4))},
                               {2, TaskKind::depth, 0},
                               {3, TaskKind::normal, 0}};
  std::vector<TaskSpec> out;
  for (const auto& t : all)
    if (rng.bernoulli(0.7)) out.push_back(t);
  if (out.empty()) out.push_back(all[0]);
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double op_max = 0;
  int n_ops = 0;
  std::string op_worst, e2e_worst;
  auto op = [&](const char* name, std::vector<Tensor<double>> in, const auxnas::testing::OpBuilder& f) {
    const double e = check_op(std::move(in), f, 7, 1e-3, kStep).max_rel;
    if (e > op_max) op_max = e, op_worst = name;
    ++n_ops;
  };
  auto t = [&](const Shape& s, double lo = -1, double hi = 1) { return random_tensor(s, rng, lo, hi); };

  for (auto o : {ops::Conv2dOpts{}, ops::Conv2dOpts{.stride = 2, .pad = 1}, ops::Conv2dOpts{.pad = 2, .dilation = 2},
                 ops::Conv2dOpts{.pad = 1, .groups = 4}})
    op("conv2d", {t({2, 4, 4, 4}), t({4, 4 / o.groups, 3, 3}), t({4})},
       [o](auto& v) { return ops::conv2d(v[0], v[1], v[2], o); });
  op("batch_norm", {t({3, 2, 2, 3}), t({2}, 0.5, 1.5), t({2})},
     [](auto& v) { return ops::batch_norm(v[0], v[1], v[2], nullptr, nullptr, {}); });
  Param<double> rm{t({2}), {}, {}, false}, rv{t({2}, 0.5, 2.0), {}, {}, false};
  op("batch_norm eval", {t({2, 2, 2, 2}), t({2}), t({2})},
     [&](auto& v) { return ops::batch_norm(v[0], v[1], v[2], &rm, &rv, {.train = false}); });
  const auto a = t({2, 3, 2, 2}), b = t({2, 3, 2, 2}), c1 = t({2, 1, 2, 2});
  op("add", {a, b}, [](auto& v) { return ops::add(v[0], v[1]); });
  op("sub", {a, b}, [](auto& v) { return ops::sub(v[0], v[1]); });
  op("mul", {a, b}, [](auto& v) { return ops::mul(v[0], v[1]); });
  op("scale", {a}, [](auto& v) { return ops::scale(v[0], 1.7); });
  op("add_scalar", {a}, [](auto& v) { return ops::add_scalar(v[0], -0.3); });
  op("concat", {a, c1}, [](auto& v) { return ops::concat<double>({v[0], v[1], v[0]}); });
  op("slice", {a}, [](auto& v) { return ops::slice(v[0], 1, 2); });
  op("relu", {a}, [](auto& v) { return ops::relu(v[0]); });
  op("abs", {a}, [](auto& v) { return ops::abs(v[0]); });
  op("exp", {a}, [](auto& v) { return ops::exp(v[0]); });
  op("tanh", {a}, [](auto& v) { return ops::tanh(v[0]); });
  op("sigmoid", {a}, [](auto& v) { return ops::sigmoid(v[0]); });
  op("softplus", {a}, [](auto& v) { return ops::softplus(v[0]); });
  op("l2_normalize", {t({2, 3, 2, 2})}, [](auto& v) { return ops::l2_normalize_channels(v[0]); });
  for (auto [oh, ow] : {std::pair{4, 4}, std::pair{2, 3}, std::pair{1, 1}})
    op("bilinear_resize", {t({1, 2, 3, 4})}, [oh, ow](auto& v) { return ops::bilinear_resize(v[0], oh, ow); });
  op("bilinear_resize align", {t({1, 2, 3, 4})}, [](auto& v) { return ops::bilinear_resize(v[0], 4, 4, true); });
  {
    const int H = 3, W = 4;
    Tensor<double> pts({2, 6, 2});
    for (std::size_t i = 0; i < pts.size(); i += 2) {
      pts[i] = std::floor(rng.uniform(0, W - 1.0)) + rng.uniform(0.2, 0.8);
      pts[i + 1] = std::floor(rng.uniform(0, H - 1.0)) + rng.uniform(0.2, 0.8);
    }
    for (auto mode : {ops::PadMode::border, ops::PadMode::zeros})
      op("grid_sample", {t({2, 2, H, W}), pts}, [=](auto& v) { return ops::grid_sample_bilinear(v[0], v[1], 2, 3, mode); });
  }
  op("deform_points", {t({1, 18, 2, 2})}, [](auto& v) { return ops::deform_points(v[0], 3, 1); });
  op("reduce sum", {a}, [](auto& v) { return ops::reduce(v[0], ops::Reduce::sum, {1, 3}); });
  op("reduce mean", {a}, [](auto& v) { return ops::reduce(v[0], ops::Reduce::mean, {0, 2}); });
  op("sum_all", {a}, [](auto& v) { return ops::sum_all(v[0]); });
  op("mean_all", {a}, [](auto& v) { return ops::mean_all(v[0]); });
  op("log_softmax", {t({2, 3, 2, 2}, -2, 2)}, [](auto& v) { return ops::log_softmax(v[0], 1); });
  op("log_softmax masked", {t({3, 5})}, [](auto& v) { return ops::pick(ops::log_softmax(v[0], 1, {1, 1, 0, 1, 1}), {0, 4, 3}); });
  op("entropy_rows", {t({3, 5})}, [](auto& v) { return ops::entropy_rows(ops::log_softmax(v[0], 1, {1, 0, 1, 1, 1})); });
  op("pick", {t({3, 5})}, [](auto& v) { return ops::pick(v[0], {4, 0, 2}); });
  op("linear", {t({3, 4}), t({4, 5}), t({5})}, [](auto& v) { return ops::linear(v[0], v[1], v[2]); });
  op("gather_rows", {t({6, 4})}, [](auto& v) { return ops::gather_rows(v[0], {1, 1, 5, 0}); });
  std::vector<int> labels;
  for (int i = 0; i < 2 * 3 * 3; ++i) labels.push_back(i % 7 == 0 ? kIgnoreLabel : static_cast<int>(rng.below(4)));
  op("loss_segmentation", {t({2, 4, 3, 3})}, [&](auto& v) { return loss_segmentation(v[0], labels); });
  const auto dgt = t({2, 1, 3, 3}, 0.5, 2.0);
  op("loss_depth", {t({2, 1, 3, 3}, 0.5, 2.0)}, [&](auto& v) { return loss_depth(v[0], dgt); });
  const auto ngt = unit_normals({2, 3, 3, 3}, rng);
  op("loss_normal", {t({2, 3, 3, 3})}, [&](auto& v) { return loss_normal(ops::l2_normalize_channels(v[0]), ngt); });
  op("kendall_term", {t({1}, 0.2, 2.0), t({1})}, [](auto& v) { return kendall_term(v[0], v[1]); });

  // Full objective: main task losses plus auxiliary losses, gradients with
  // respect to sampled entries of every trainable parameter.
  double e2e_max = 0;
  std::size_t e2e_checked = 0;
  for (int trial = 0; trial < 2; ++trial) {
    Rng r(200 + trial);
    const auto m = model_with({{1, TaskKind::segmentation, 3}, {2, TaskKind::depth, 0}, {3, TaskKind::normal, 0}}, 16,
                              trial ? Variant::context : Variant::baseline);
    auto model = build_model<double>(m, r);
    ObjectiveSpec spec;
    spec.aux = trial ? AuxSpec::searched(random_valid_genotype(m, 16, r)) : AuxSpec::basic({1, 2, 3});
    init_aux(model.params, spec.aux, m, r);
    // Zero-initialised deformable offsets put every sample on the pixel
    // lattice, where bilinear sampling has a kink; move them off it.
    for (auto& [name, p] : model.params) {
      if (name.find(".offset.w") != std::string::npos)
        for (auto& v : p.value.values) v = r.uniform(-0.01, 0.01);
      if (name.find(".offset.b") != std::string::npos)
        for (auto& v : p.value.values) v = r.uniform(0.3, 0.7);
    }
    const auto x = random_tensor({2, 3, 16, 16}, r);
    const auto y = random_targets(m, 2, r);
    auto loss = [&](bool grads) {
      Tape<double> tape;
      Ctx<double> c{tape, model.params, true};
      auto obj = compute_objective(c, model, spec, kNoKendall, x, y);
      if (grads) {
        model.params.zero_grad();
        tape.backward(obj.total);
      }
      return obj.total.value()[0];
    };
    loss(true);
    for (auto& [name, p] : model.params) {
      if (!p.trainable) continue;
      std::vector<std::size_t> idx;
      for (int k = 0; k < 3; ++k) idx.push_back(r.below(static_cast<std::uint32_t>(p.value.size())));
      std::vector<double> analytic;
      for (auto i : idx) analytic.push_back(p.grad.empty() ? 0.0 : p.grad[i]);
      const auto numeric = auxnas::testing::numeric_grad(p.value.values, [&] { return loss(false); }, idx, kStep);
      const auto res = auxnas::testing::compare_grads(analytic, numeric);
      if (res.max_rel > e2e_max) e2e_max = res.max_rel, e2e_worst = name;
      e2e_checked += res.checked;
    }
  }
  const double secs = seconds_since(t0);
  return {op_max <= 1e-6 && e2e_max <= 1e-4 && secs < 120,
          fmt("%d op checks max rel %.2e at %s (<= 1e-6); end-to-end %zu entries max rel %.2e at %s (<= 1e-4); %.1f s (< 120)",
              n_ops, op_max, op_worst.c_str(), e2e_checked, e2e_max, e2e_worst.c_str(), secs)};
}

Outcome aux_removal() {
  int identical = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(300 + trial);
    const auto m = model_with(random_tasks(rng), 16, random_variant(rng));
    auto model = build_model<float>(m, rng);
    const AuxSpec spec = random_aux(m, rng);
    init_aux(model.params, spec, m, rng);
    auto stripped = strip_aux(model);
    const auto x = random_tensor({2, 3, 16, 16}, rng).cast<float>();
    Tape<float> t1, t2;
    Ctx<float> c1{t1, model.params, false}, c2{t2, stripped.params, false};
    auto with = forward_main(c1, model, t1.constant(x));
    aux_forward(c1, spec, m, with.taps);
    auto without = forward_main(c2, stripped, t2.constant(x));
    bool same = with.preds.size() == without.preds.size();
    for (std::size_t i = 0; same && i < with.preds.size(); ++i) same = with.preds[i].value() == without.preds[i].value();
    identical += same;
  }
  return {identical == 100, fmt("%d/100 random models and inputs bitwise identical after strip_aux", identical)};
}

Outcome decomposition() {
  double loss_err = 0, grad_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(400 + trial);
    const auto m = model_with(random_tasks(rng), 16, random_variant(rng));
    auto model = build_model<double>(m, rng);
    ObjectiveSpec spec;
    spec.aux = random_aux(m, rng);
    init_aux(model.params, spec.aux, m, rng);
    const int N = 1 + static_cast<int>(rng.below(3));
    const auto x = random_tensor({N, 3, 16, 16}, rng);
    const auto y = random_targets(m, N, rng);
    auto run = [&](ObjectivePart part, std::map<std::string, std::vector<double>>& g) {
      Tape<double> tape;
      Ctx<double> c{tape, model.params, true};
      auto obj = compute_objective(c, model, spec, kNoKendall, x, y, part);
      model.params.zero_grad();
      tape.backward(obj.total);
      for (auto& [name, p] : model.params) g[name] = p.grad.empty() ? std::vector<double>(p.value.size(), 0.0) : p.grad;
      return obj.total.value()[0];
    };
    std::map<std::string, std::vector<double>> ga, gm, gx;
    const double all = run(ObjectivePart::all, ga);
    const double main = run(ObjectivePart::main_only, gm);
    const double aux = run(ObjectivePart::aux_only, gx);
    loss_err = std::max(loss_err, std::abs(all - (main + aux)));
    for (auto& [name, v] : ga)
      for (std::size_t i = 0; i < v.size(); ++i) grad_err = std::max(grad_err, std::abs(v[i] - (gm[name][i] + gx[name][i])));
  }
  return {loss_err <= 1e-12 && grad_err <= 1e-12,
          fmt("20 configurations: max |total - (main + aux)| loss %.2e, gradient %.2e (<= 1e-12)", loss_err, grad_err)};
}

Outcome codec() {
  ControllerConfig cfg;
  Controller ctrl(cfg, 500);
  Rng rng(501);
  int decoded = 0, lengths = 0;
  for (int i = 0; i < 10000; ++i) {
    auto s = ctrl.sample(rng);
    lengths += static_cast<int>(s.tokens.size()) == 5 * cfg.P * cfg.T;
    try {
      decode_tokens(s.tokens, cfg.P, cfg.T);
      ++decoded;
    } catch (const std::exception&) {
    }
  }
  Rng grng(502);
  int round = 0, glen = 0;
  for (int i = 0; i < 10000; ++i) {
    const int P = 1 + static_cast<int>(grng.below(4)), T = 1 + static_cast<int>(grng.below(3));
    const auto g = random_genotype(P, T, grng);
    const auto seq = encode_genotype(g);
    glen += static_cast<int>(seq.size()) == 5 * P * T;
    round += decode_tokens(seq, P, T) == g && encode_genotype(decode_tokens(seq, P, T)) == seq;
  }
  return {decoded == 10000 && lengths == 10000 && round == 10000 && glen == 10000,
          fmt("controller samples decoded %d/10000 (length 5PT %d); genotype round trips %d/10000 (length 5PT %d)", decoded,
              lengths, round, glen)};
}

Outcome bandit() {
  const auto t0 = std::chrono::steady_clock::now();
  int ok = 0;
  std::string probs;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = auxnas::testing::run_bandit(seed, 500, 16, 0.9);
    ok += r.reached;
    probs += fmt(" seed %d: p=%.3f after %d updates;", static_cast<int>(seed), r.final_prob, r.updates);
  }
  const double secs = seconds_since(t0);
  return {ok == 3 && secs < 60, fmt("%d/3 seeds reach p >= 0.9 within 500 updates;%s %.1f s (< 60)", ok, probs.c_str(), secs)};
}

Outcome reward() {
  Rng rng(600);
  double gm_err = 0;
  int monotone = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double miou = rng.uniform(0.01, 1.0), rel = rng.uniform(0, 3), ang = rng.uniform(0, 90);
    std::vector<MetricValue> ms = {{miou, true}, {rel, false}, {ang, false, 180}};
    const double direct = std::pow(miou * (1 / (1 + rel)) * (1 / (1 + ang / 180)), 1.0 / 3.0);
    gm_err = std::max(gm_err, std::abs(compute_reward(ms).value - direct));
    bool mono = true;
    for (std::size_t k = 1; k < ms.size(); ++k) {
      auto worse = ms;
      worse[k].value += rng.uniform(1e-3, 2.0);
      mono = mono && compute_reward(worse).value < compute_reward(ms).value;
    }
    monotone += mono;
  }
  std::vector<TaskMetrics> perfect = {{1, TaskKind::segmentation}, {2, TaskKind::depth}, {3, TaskKind::normal}};
  perfect[0].miou = 1, perfect[1].rel = 0, perfect[2].angle = 0;
  const double best = compute_reward(reward_metrics(perfect)).value;
  return {gm_err <= 1e-12 && monotone == 100 && best == 1.0,
          fmt("geometric mean error %.2e (<= 1e-12); strictly decreasing in %d/100 probes; perfect metrics give %.17g", gm_err,
              monotone, best)};
}

Outcome metric_oracles() {
  Rng rng(700);
  int match = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(5));
    std::vector<int> p(64), g(64);
    for (std::size_t i = 0; i < 64; ++i) {
      p[i] = static_cast<int>(rng.below(static_cast<std::uint32_t>(K)));
      g[i] = rng.bernoulli(0.1) ? 255 : static_cast<int>(rng.below(static_cast<std::uint32_t>(K)));
    }
    std::vector<double> dp(64), dg(64);
    for (std::size_t i = 0; i < 64; ++i) dp[i] = rng.uniform(0.1, 5.0), dg[i] = rng.uniform(0.1, 5.0);
    const auto np = unit_normals({1, 3, 8, 8}, rng), ng = unit_normals({1, 3, 8, 8}, rng);
    match += metrics::miou(p, g, K) == oracle::miou(p, g, K) && metrics::pixel_acc(p, g, K) == oracle::pixacc(p, g) &&
             metrics::rel(dp, dg) == oracle::rel(dp, dg) && metrics::rms(dp, dg) == oracle::rms(dp, dg) &&
             metrics::mean_angle(np.values, ng.values, 1, 64) == oracle::angle(np.values, ng.values, 64);
  }
  return {match == 100, fmt("%d/100 random 8x8 instances match the brute-force oracle exactly on all five metrics", match)};
}

Outcome protocol_constants() {
  double lr_err = 0;
  for (int k = 0; k < 10; ++k) {
    const int max = 2000, it = k * max / 9;
    lr_err = std::max(lr_err, std::abs(optim::poly_lr(it, max, 0.01) - 0.01 * std::pow(1.0 - double(it) / max, 0.9)));
  }
  // deep supervision: total = main + 0.1 * sum(side losses)
  Rng rng(800);
  const auto m = model_with({{1, TaskKind::segmentation, 5}, {2, TaskKind::depth, 0}}, 16);
  auto model = build_model<double>(m, rng);
  ObjectiveSpec spec;
  spec.ds_task = 2;
  spec.ds_scale = TrainConfig{}.ds_scale;
  init_deep_supervision(model.params, m, 2, rng);
  const auto x = random_tensor({2, 3, 16, 16}, rng);
  const auto y = random_targets(m, 2, rng);
  Tape<double> tape;
  Ctx<double> c{tape, model.params, true};
  auto obj = compute_objective(c, model, spec, kNoKendall, x, y);
  double main = 0, side = 0;
  for (const auto& t : obj.main) main += t.loss.value()[0];
  for (const auto& t : obj.ds) side += t.loss.value()[0];
  const double ds_scale = (obj.total.value()[0] - main) / side;
  TrainConfig tc;
  const bool prior = initial_lr(Strategy::parse("prior-t1"), tc) == tc.lr0 / 10 &&
                     initial_lr(Strategy::parse("prior-t2"), tc) == tc.lr0 / 10;
  const int batch = Config{}.train.batch;
  return {lr_err <= 1e-9 && TrainConfig{}.ds_scale == 0.1 && std::abs(ds_scale - 0.1) < 1e-12 && prior && batch == 12,
          fmt("poly_lr error %.2e at 10 points (<= 1e-9); deep-supervision scale %.12g (configured %g); prior lr0/10 %s; "
              "default batch %d",
              lr_err, ds_scale, TrainConfig{}.ds_scale, prior ? "yes" : "no", batch)};
}

// ---------------------------------------------------------------------------
// Desk-scale training experiments on the standard set

struct Standard {
  data::Dataset ds;
  Config cfg;
};

const Standard& standard() {
  static const Standard s = [] {
    Standard st;
    const auto dir = scratch("standard");
    data::gen_synthetic(data::GenConfig{}, dir);
    st.ds = data::load_dataset(dir);
    st.cfg.data_dir = dir.string();
    return st;
  }();
  return s;
}

RunResult<float> train_standard(const std::string& strategy, std::uint64_t seed, const fs::path& init = {},
                                const fs::path& out = {}) {
  const auto& st = standard();
  Config c = st.cfg;
  c.train.seed = seed;
  return train_once(c, Strategy::parse(strategy), st.ds, init, out);
}

// Matches the scratch directory used by Runs::get.
fs::path run_dir(const std::string& strategy, std::uint64_t seed) {
  return fs::temp_directory_path() / ("auxnas_accept_" + strategy + "-s" + std::to_string(seed));
}

struct Runs {
  std::map<std::pair<std::string, std::uint64_t>, RunRecord> records;
  std::map<std::pair<std::string, std::uint64_t>, double> seconds;
  const RunRecord& get(const std::string& s, std::uint64_t seed, const fs::path& init = {}) {
    const auto key = std::pair{s, seed};
    if (!records.count(key)) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = scratch(s + "-s" + std::to_string(seed));
      records[key] = train_standard(s, seed, init, out).record;
      seconds[key] = seconds_since(t0);
      std::fprintf(stderr, "  trained %s seed %d in %.1f s\n", s.c_str(), static_cast<int>(seed), seconds[key]);
    }
    return records[key];
  }
};

Runs& runs() {
  static Runs r;
  return r;
}

const TaskMetrics& task_of(const RunRecord& r, int id) {
  for (const auto& t : r.final_eval()->tasks)
    if (t.task_id == id) return t;
  throw ContractError("missing task metrics");
}

Outcome strategy_direction() {
  const auto& ds = standard().ds;
  std::string detail = fmt("train %zu / val %zu;", ds.splits.train.size(), ds.splits.val.size());
  int wins = 0;
  double slowest = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& joint = runs().get("joint", seed);
    const auto& both = runs().get("auxi-both", seed);
    if (joint.diverged || both.diverged) {
      detail += fmt(" seed %d diverged;", static_cast<int>(seed));
      continue;
    }
    const auto &j1 = task_of(joint, 1), &b1 = task_of(both, 1), &j2 = task_of(joint, 2), &b2 = task_of(both, 2);
    const bool win = b1.miou >= j1.miou && b2.rel <= j2.rel;
    wins += win;
    detail += fmt(" seed %d mIoU %.4f vs %.4f, Rel %.4f vs %.4f%s;", static_cast<int>(seed), b1.miou, j1.miou, b2.rel,
                  j2.rel, win ? "" : " (miss)");
    slowest = std::max({slowest, runs().seconds[{"joint", seed}], runs().seconds[{"auxi-both", seed}]});
  }
  const bool sizes = ds.splits.train.size() == 1024 && ds.splits.val.size() == 256;
  return {sizes && wins >= 2 && slowest < 600,
          detail + fmt(" auxi-both >= joint in %d/3 seeds (need 2); slowest run %.1f s (< 600)", wins, slowest)};
}

Outcome gradient_flow() {
  std::string detail;
  int seeds_ok = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    runs().get("single-t1", seed);
    const auto& aux = runs().get("auxi-t2", seed, run_dir("single-t1", seed) / "model.ckpt");
    const auto& joint = runs().get("joint", seed);
    const auto pa = aux.cumulative_probe(), pj = joint.cumulative_probe();
    int layers = 0;
    detail += fmt(" seed %d:", static_cast<int>(seed));
    for (std::size_t i = 0; i < pa.size(); ++i) {
      layers += pa[i] > pj[i];
      detail += fmt(" %s %.3g vs %.3g", aux.probe_layers[i].c_str(), pa[i], pj[i]);
    }
    detail += ";";
    seeds_ok += !aux.diverged && !joint.diverged && pa.size() == 3 && layers >= 2;
  }
  return {seeds_ok >= 2, fmt("auxi-t2 (donor single-t1) probe exceeds joint on >= 2/3 layers in %d/3 seeds (need 2);", seeds_ok) +
                             detail};
}

Outcome determinism() {
  const auto root = scratch("compare");
  Config c;
  c.data_dir = (root / "data").string();
  c.gen.n = 64;
  c.gen.height = c.gen.width = 16;
  c.train.iters = 20;
  c.train.batch = 4;
  c.train.eval_every = 10;
  cmd_gen_data(c.gen, c.data_dir);
  std::ostringstream log;
  c.output_dir = (root / "a").string();
  const int ca = cmd_compare(c, "single-t1,joint,prior-t2,ds-t1,kendall,auxi-t2,auxi-both", "1,2", log);
  c.output_dir = (root / "b").string();
  const int cb = cmd_compare(c, "single-t1,joint,prior-t2,ds-t1,kendall,auxi-t2,auxi-both", "1,2", log);
  const auto ta = io::read_file(root / "a" / "table.csv"), tb = io::read_file(root / "b" / "table.csv");
  return {ca == 0 && cb == 0 && ta == tb && !ta.empty(),
          fmt("two compare runs (7 strategies x 2 seeds) exit %d/%d; table.csv %zu bytes, %s", ca, cb, ta.size(),
              ta == tb ? "bitwise identical" : "DIFFERENT")};
}

}  // namespace

// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"aux-removal invariance", aux_removal},
      {"objective decomposition", decomposition},
      {"genotype codec", codec},
      {"PPO bandit convergence", bandit},
      {"reward function", reward},
      {"metric oracles", metric_oracles},
      {"schedule and protocol constants", protocol_constants},
      {"auxi-both vs joint on the standard set", strategy_direction},
      {"gradient flow under auxi-t2", gradient_flow},
      {"compare determinism", determinism},
  };
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
