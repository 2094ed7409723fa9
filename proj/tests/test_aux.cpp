#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "auxnas/aux.hpp"
#include "support/gradcheck.hpp"

using namespace auxnas;
using auxnas::testing::random_tensor;

namespace {

constexpr int P = kNumTaps;

ModelConfig two_task() {
  ModelConfig cfg;
  cfg.tasks = {{1, TaskKind::segmentation, 5}, {2, TaskKind::depth, 5}};
  return cfg;
}

template <class T>
struct Net {
  MtlModel<T> model;
  AuxSpec spec;
};

template <class T>
Net<T> make(const ModelConfig& cfg, const AuxSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Net<T> n{build_model<T>(cfg, rng), spec};
  init_aux(n.model.params, spec, cfg, rng);
  return n;
}

std::size_t count_prefix(const ParamSet<float>& ps, const std::string& prefix, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& [name, _] : ps)
    if (name.rfind(prefix, 0) == 0 && name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ++n;
  return n;
}

AuxCell cell(int a, int b, AdaptorOp o1, AdaptorOp o2, AggOp g = AggOp::sum) { return {a, b, o1, o2, g}; }

}  // namespace

// ---------------------------------------------------------------------------
// Availability and codec

TEST(Genotype, SequenceLengthIsFivePT) {
  EXPECT_EQ(sequence_length(4, 2), 40);
  EXPECT_EQ(sequence_length(4, 3), 60);
  EXPECT_EQ(loc_vocab(4, 2), 12);
  EXPECT_EQ(role_at(0), TokenRole::loc);
  EXPECT_EQ(role_at(1), TokenRole::loc);
  EXPECT_EQ(role_at(2), TokenRole::adaptor);
  EXPECT_EQ(role_at(3), TokenRole::adaptor);
  EXPECT_EQ(role_at(4), TokenRole::aggregator);
  EXPECT_EQ(role_at(5), TokenRole::loc);
}

TEST(Genotype, AllZerosDecodesToTapOneSepConvSum) {
  auto g = decode_tokens(TokenSeq(40, 0), 4, 2);
  ASSERT_EQ(g.T(), 2);
  for (const auto& cells : g.tasks) {
    ASSERT_EQ(cells.size(), 4u);
    for (const auto& c : cells) EXPECT_EQ(c, cell(0, 0, AdaptorOp::sep_conv3x3, AdaptorOp::sep_conv3x3));
  }
  EXPECT_EQ(encode_genotype(g), TokenSeq(40, 0));
}

TEST(Genotype, FirstCellCannotReferenceACell) {
  TokenSeq seq(40, 0);
  seq[0] = 4 + 3;
  EXPECT_THROW(decode_tokens(seq, 4, 2), GenotypeError);
  seq[0] = 4;  // the first cell's own output does not exist yet either
  EXPECT_THROW(decode_tokens(seq, 4, 2), GenotypeError);
  EXPECT_THROW(decode_tokens(TokenSeq(39, 0), 4, 2), CodecError);
}

TEST(Genotype, AvailabilityRule) {
  // Task 2 (t=1), cell p=2 may read taps, cells p'<2 of tasks 1 and 2.
  std::set<int> ok;
  for (int l = 0; l < loc_vocab(4, 2); ++l)
    if (location_available(l, 1, 2, 4, 2, false)) ok.insert(l);
  EXPECT_EQ(ok, (std::set<int>{0, 1, 2, 3, 4, 5, 8, 9}));
  ok.clear();
  for (int l = 0; l < loc_vocab(4, 2); ++l)
    if (location_available(l, 1, 2, 4, 2, true)) ok.insert(l);
  EXPECT_EQ(ok, (std::set<int>{0, 1, 2, 3, 4, 5}));
}

TEST(Genotype, CrossTaskReferenceRoundTrips) {
  Genotype g{4, {}};
  g.tasks.push_back({cell(0, 1, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(4, 2, AdaptorOp::skip_connect, AdaptorOp::conv1x1),
                     cell(5, 3, AdaptorOp::sep_conv3x3, AdaptorOp::deform_conv3x3, AggOp::concat),
                     cell(6, 0, AdaptorOp::conv1x1, AdaptorOp::sep_conv3x3_dil6)});
  g.tasks.push_back({cell(1, 2, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(4, 8, AdaptorOp::skip_connect, AdaptorOp::skip_connect),
                     cell(5, 9, AdaptorOp::sep_conv3x3_dil3, AdaptorOp::conv1x1, AggOp::concat),
                     cell(6, 10, AdaptorOp::conv1x1, AdaptorOp::conv1x1)});
  auto seq = encode_genotype(g);
  EXPECT_EQ(seq.size(), 40u);
  EXPECT_EQ(decode_tokens(seq, 4, 2), g);
  EXPECT_EQ(genotype_from_json(genotype_to_json(g)), g);
  // Strict mode forbids the own-task references above.
  EXPECT_THROW(decode_tokens(seq, 4, 2, true), GenotypeError);
  EXPECT_THROW(encode_genotype(g, true), CodecError);
}

TEST(Genotype, RandomRoundTrip) {
  Rng rng(42);
  for (int i = 0; i < 2000; ++i) {
    const int p = 1 + static_cast<int>(rng.below(4)), t = 1 + static_cast<int>(rng.below(3));
    auto g = random_genotype(p, t, rng);
    auto seq = encode_genotype(g);
    ASSERT_EQ(static_cast<int>(seq.size()), sequence_length(p, t));
    ASSERT_EQ(decode_tokens(seq, p, t), g);
    ASSERT_EQ(encode_genotype(decode_tokens(seq, p, t)), seq);
  }
}

TEST(Genotype, JsonFileRoundTrip) {
  Rng rng(1);
  auto g = random_genotype(4, 2, rng);
  auto path = std::filesystem::temp_directory_path() / "auxnas_geno.json";
  write_genotype(path, g);
  EXPECT_EQ(read_genotype(path), g);
  auto j = genotype_to_json(g);
  EXPECT_EQ(j.at("P"), 4);
  EXPECT_EQ(j.at("T"), 2);
  EXPECT_EQ(j.at("op_vocab_version"), kOpVocabVersion);
  EXPECT_EQ(j.at("cells").size(), 8u);
  j["op_vocab_version"] = 99;
  EXPECT_THROW(genotype_from_json(j), CodecError);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Building

TEST(BasicAux, ChainBaseCaseIsAdaptorAndHead) {
  auto spec = AuxSpec::basic({1});
  spec.chain_length = 1;
  auto n = make<float>(two_task(), spec, 1);
  EXPECT_EQ(count_prefix(n.model.params, "aux.t1.ad", ".conv.w"), 1u);
  EXPECT_EQ(count_prefix(n.model.params, "aux.t1.agg", ".w"), 0u);
  EXPECT_TRUE(n.model.params.contains("aux.t1.head.w"));
}

TEST(BasicAux, FourTapsGiveFourAdaptorsThreeAggregations) {
  for (auto agg : {AggOp::sum, AggOp::concat}) {
    auto n = make<float>(two_task(), AuxSpec::basic({1}, agg), 1);
    EXPECT_EQ(count_prefix(n.model.params, "aux.t1.ad", ".conv.w"), 4u);
    if (agg == AggOp::concat) {
      EXPECT_EQ(count_prefix(n.model.params, "aux.t1.agg", ".proj.conv.w"), 3u);
    }
    Rng rng(2);
    Tape<float> tape;
    Ctx<float> c{tape, n.model.params};
    auto main = forward_main(c, n.model, tape.constant(random_tensor({2, 3, 32, 32}, rng).cast<float>()));
    auto aux = aux_forward(c, n.spec, n.model.cfg, main.taps);
    ASSERT_EQ(aux.size(), 1u);
    EXPECT_EQ(aux[0].pred.shape(), main.preds[0].shape());
  }
}

TEST(BasicAux, PredictionShapesMatchMainHeads) {
  auto cfg = two_task();
  cfg.tasks.push_back({3, TaskKind::normal, 5});
  auto n = make<double>(cfg, AuxSpec::basic({1, 2, 3}), 3);
  Rng rng(3);
  Tape<double> tape;
  Ctx<double> c{tape, n.model.params};
  auto main = forward_main(c, n.model, tape.constant(random_tensor({2, 3, 32, 32}, rng)));
  auto aux = aux_forward(c, n.spec, cfg, main.taps);
  ASSERT_EQ(aux.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(aux[i].pred.shape(), main.preds[i].shape());
  for (double v : aux[1].pred.value().values) EXPECT_GT(v, 0.0);
}

TEST(GenotypeAux, MinimalSingleCell) {
  ModelConfig cfg;
  cfg.tasks = {{1, TaskKind::depth, 5}};
  Genotype g{1, {{cell(0, 0, AdaptorOp::conv1x1, AdaptorOp::conv1x1)}}};
  ParamSet<float> ps;
  Rng rng(1);
  build_from_genotype(ps, g, cfg.tasks, {8}, {}, rng);
  EXPECT_TRUE(ps.contains("aux.t1.c0.op1.conv.w"));
  EXPECT_TRUE(ps.contains("aux.t1.c0.op2.conv.w"));
  EXPECT_TRUE(ps.contains("aux.t1.head.w"));
}

TEST(GenotypeAux, InvalidGenotypesRegisterNothing) {
  auto cfg = two_task();
  Rng rng(1);
  Genotype skip_raw{P, {}};
  for (int t = 0; t < 2; ++t)
    skip_raw.tasks.push_back({cell(0, 0, AdaptorOp::skip_connect, AdaptorOp::conv1x1), cell(0, 0, AdaptorOp::conv1x1, AdaptorOp::conv1x1),
                              cell(0, 0, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(0, 0, AdaptorOp::conv1x1, AdaptorOp::conv1x1)});
  ParamSet<float> ps;
  EXPECT_THROW(build_from_genotype(ps, skip_raw, cfg.tasks, {8, 16, 24, 32}, {}, rng), GenotypeError);
  EXPECT_EQ(ps.size(), 0u);
  // Tap O_2 already has c_aux channels, so skip is an identity there.
  skip_raw.tasks[0][0].in1 = 1;
  skip_raw.tasks[1][0].op1 = AdaptorOp::conv1x1;
  EXPECT_NO_THROW(build_from_genotype(ps, skip_raw, cfg.tasks, {8, 16, 24, 32}, {}, rng));
  Genotype ahead = skip_raw;
  ahead.tasks[0][0].in2 = P;
  ParamSet<float> ps2;
  EXPECT_THROW(build_from_genotype(ps2, ahead, cfg.tasks, {8, 16, 24, 32}, {}, rng), GenotypeError);
  EXPECT_EQ(ps2.size(), 0u);
}

TEST(GenotypeAux, CrossTaskCellsFeedLaterTask) {
  auto cfg = two_task();
  Genotype g{P, {}};
  g.tasks.push_back({cell(0, 1, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(4, 2, AdaptorOp::conv1x1, AdaptorOp::conv1x1),
                     cell(5, 3, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(6, 6, AdaptorOp::conv1x1, AdaptorOp::conv1x1)});
  g.tasks.push_back({cell(0, 0, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(4, 4, AdaptorOp::skip_connect, AdaptorOp::skip_connect),
                     cell(9, 9, AdaptorOp::skip_connect, AdaptorOp::skip_connect),
                     cell(10, 10, AdaptorOp::skip_connect, AdaptorOp::skip_connect)});
  // Task 2 only reads task 1's first cell; zeroing the first cell's weights
  // must change task 2's aux prediction.
  auto n = make<double>(cfg, AuxSpec::searched(g), 4);
  Rng rng(5);
  auto x = random_tensor({2, 3, 32, 32}, rng);
  auto run = [&] {
    Tape<double> tape;
    Ctx<double> c{tape, n.model.params, false};
    auto main = forward_main(c, n.model, tape.constant(x));
    return aux_forward(c, n.spec, cfg, main.taps)[1].pred.value();
  };
  auto before = run();
  auto& w = n.model.params.at("aux.t1.c0.op1.conv.w").value;
  for (auto& v : w.values) v *= 3.0;
  EXPECT_NE(run(), before);
}

// ---------------------------------------------------------------------------
// Gradient flow and removal

namespace {

struct Grads {
  std::map<std::string, std::vector<double>> by_name;
  double norm(const ParamSet<double>& ps, Group group) const {
    double s = 0;
    for (const auto& [name, g] : by_name)
      if (ps.at(name).tag.group == group)
        for (double v : g) s += v * v;
    return std::sqrt(s);
  }
};

Grads aux_only_grads(Net<double>& n, const Tensor<double>& x, bool detach_taps) {
  Tape<double> tape;
  Ctx<double> c{tape, n.model.params};
  n.model.params.zero_grad();
  auto main = forward_main(c, n.model, tape.constant(x));
  auto taps = main.taps;
  if (detach_taps)
    for (auto& t : taps) t = ops::stop_gradient(t);
  auto aux = aux_forward(c, n.spec, n.model.cfg, taps);
  Var<double> loss;
  Rng rng(9);
  for (auto& a : aux) {
    auto l = auxnas::testing::project(a.pred, random_tensor(a.pred.shape(), rng));
    loss = loss.valid() ? ops::add(loss, l) : l;
  }
  tape.backward(loss);
  Grads g;
  for (auto& [name, p] : n.model.params) g.by_name[name] = p.grad;
  return g;
}

}  // namespace

TEST(AuxGradients, NeverReachTaskParameters) {
  for (const auto& spec : {AuxSpec::basic({1, 2}), AuxSpec::basic({2}, AggOp::concat)}) {
    auto n = make<double>(two_task(), spec, 6);
    Rng rng(6);
    auto g = aux_only_grads(n, random_tensor({2, 3, 32, 32}, rng), false);
    for (const auto& [name, v] : g.by_name)
      if (n.model.params.at(name).tag.group == Group::task) {
        for (double x : v) ASSERT_EQ(x, 0.0) << name;
      }
    EXPECT_GT(g.norm(n.model.params, Group::shared), 0.0);
    EXPECT_GT(g.norm(n.model.params, Group::aux), 0.0);
  }
}

TEST(AuxGradients, DetachedTapsBlockSharedGradients) {
  auto n = make<double>(two_task(), AuxSpec::basic({1, 2}), 7);
  Rng rng(7);
  auto g = aux_only_grads(n, random_tensor({2, 3, 32, 32}, rng), true);
  EXPECT_EQ(g.norm(n.model.params, Group::shared), 0.0);
  EXPECT_GT(g.norm(n.model.params, Group::aux), 0.0);
}

TEST(StripAux, ForwardIsBitwiseIdentical) {
  Rng grng(3);
  for (const auto& spec : {AuxSpec::basic({1, 2}), AuxSpec::searched(random_genotype(P, 2, grng))}) {
    AuxSpec s = spec;
    if (s.kind == AuxKind::genotype)
      for (auto& cells : s.genotype.tasks)
        for (auto& c : cells) {
          if (c.op1 == AdaptorOp::skip_connect) c.op1 = AdaptorOp::conv1x1;
          if (c.op2 == AdaptorOp::skip_connect) c.op2 = AdaptorOp::conv1x1;
        }
    auto n = make<float>(two_task(), s, 8);
    auto stripped = strip_aux(n.model);
    EXPECT_EQ(stripped.params.size(),
              n.model.params.count_if([](const Param<float>& p) { return p.tag.group != Group::aux; }));
    Rng rng(8);
    auto x = random_tensor({2, 3, 32, 32}, rng).cast<float>();
    Tape<float> t1, t2;
    Ctx<float> c1{t1, n.model.params, false}, c2{t2, stripped.params, false};
    auto with = forward_main(c1, n.model, t1.constant(x));
    aux_forward(c1, s, n.model.cfg, with.taps);
    auto without = forward_main(c2, stripped, t2.constant(x));
    for (std::size_t i = 0; i < with.preds.size(); ++i) EXPECT_EQ(with.preds[i].value(), without.preds[i].value());
  }
}

TEST(StripAux, StrippedCheckpointLoadsIntoPlainModel) {
  auto n = make<float>(two_task(), AuxSpec::basic({1, 2}), 9);
  auto stripped = strip_aux(n.model);
  auto loaded = model_from_checkpoint<float>(decode_checkpoint(encode_checkpoint(stripped.cfg, stripped.params)));
  EXPECT_EQ(loaded.params.paths(), stripped.params.paths());
  Rng rng(9);
  auto plain = build_model<float>(two_task(), rng);
  EXPECT_EQ(loaded.params.paths(), plain.params.paths());
}

TEST(BasicAux, IsAPointInTheSearchSpace) {
  // Chain connectivity with conv1x1 adaptors: cell p aggregates the previous
  // cell (identity via skip) with the next tap. The last cell doubles h via
  // two skips, compensated by halving the head weight.
  auto cfg = two_task();
  Genotype g{P, {}};
  for (int t = 0; t < 2; ++t) {
    const int base = P + t * P;
    g.tasks.push_back({cell(0, 1, AdaptorOp::conv1x1, AdaptorOp::conv1x1), cell(base, 2, AdaptorOp::skip_connect, AdaptorOp::conv1x1),
                       cell(base + 1, 3, AdaptorOp::skip_connect, AdaptorOp::conv1x1),
                       cell(base + 2, base + 2, AdaptorOp::skip_connect, AdaptorOp::skip_connect)});
  }
  auto basic = make<double>(cfg, AuxSpec::basic({1, 2}), 10);
  auto searched = make<double>(cfg, AuxSpec::searched(g), 10);
  for (const auto& t : cfg.tasks) {
    auto copy_block = [&](const std::string& from, const std::string& to) {
      for (const auto& [name, p] : basic.model.params)
        if (name.rfind(from + ".", 0) == 0) searched.model.params.at(to + name.substr(from.size())).value = p.value;
    };
    const std::string b = auxpath::task(t.id), s = auxpath::task(t.id);
    copy_block(b + ".ad0", s + ".c0.op1");
    copy_block(b + ".ad1", s + ".c0.op2");
    copy_block(b + ".ad2", s + ".c1.op2");
    copy_block(b + ".ad3", s + ".c2.op2");
    copy_block(b + ".head", s + ".head");
    for (auto& v : searched.model.params.at(auxpath::head(t.id) + ".w").value.values) v *= 0.5;
  }
  for (const auto& [name, p] : basic.model.params)
    if (p.tag.group != Group::aux) searched.model.params.at(name).value = p.value;
  Rng rng(11);
  auto x = random_tensor({2, 3, 32, 32}, rng);
  auto preds = [&](Net<double>& n) {
    Tape<double> tape;
    Ctx<double> c{tape, n.model.params};
    auto main = forward_main(c, n.model, tape.constant(x));
    std::vector<Tensor<double>> out;
    for (auto& a : aux_forward(c, n.spec, cfg, main.taps)) out.push_back(a.pred.value());
    return out;
  };
  auto a = preds(basic), b = preds(searched);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}
