#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "auxnas/genotype.hpp"
#include "auxnas/layers.hpp"
#include "auxnas/ops.hpp"

namespace auxnas {

struct ControllerConfig {
  int P = 4;
  int T = 2;
  bool strict = false;
  int embed = 32;
  int hidden = 64;
  double init_range = 0.1;
};

// Autoregressive LSTM policy over genotype token sequences. All roles share one
// embedding table: [loc tokens | adaptor tokens | aggregator tokens | start].
// Heads start at zero so the initial policy is uniform over each (masked)
// vocabulary.
class Controller {
 public:
  using Scalar = double;

  struct Sample {
    TokenSeq tokens;
    std::vector<double> logp;                // per token
    std::vector<double> entropy;             // per step
    std::vector<std::vector<double>> probs;  // per step, over the step's vocabulary
    double total_logp() const {
      double s = 0;
      for (double v : logp) s += v;
      return s;
    }
  };

  // Teacher-forced pass over a batch: per-step picked log-probs and entropies,
  // each [B,1].
  struct Evaluation {
    std::vector<Var<Scalar>> logp, entropy;
  };

  explicit Controller(ControllerConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.P < 1 || cfg.T < 1 || cfg.embed < 1 || cfg.hidden < 1) throw ConfigError("controller: invalid sizes");
    Rng rng(seed, 0xc0417);
    const Tag tag = Tag::controller();
    auto uniform = [&](Shape s) {
      Tensor<Scalar> t(std::move(s));
      for (auto& v : t.values) v = rng.uniform(-cfg.init_range, cfg.init_range);
      return t;
    };
    const int H = cfg.hidden;
    params_.add("ctrl.embed", uniform({embed_rows(), cfg.embed}), tag);
    params_.add("ctrl.lstm.w", uniform({cfg.embed + H, 4 * H}), tag);
    params_.add("ctrl.lstm.b", Tensor<Scalar>(Shape{4 * H}), tag);
    for (auto [name, n] : {std::pair{"loc", loc_vocab(cfg.P, cfg.T)}, std::pair{"adaptor", kNumAdaptorOps},
                           std::pair{"agg", kNumAggOps}}) {
      params_.add(std::string("ctrl.head.") + name + ".w", Tensor<Scalar>(Shape{H, n}), tag);
      params_.add(std::string("ctrl.head.") + name + ".b", Tensor<Scalar>(Shape{n}), tag);
    }
  }

  const ControllerConfig& config() const { return cfg_; }
  ParamSet<Scalar>& params() { return params_; }
  const ParamSet<Scalar>& params() const { return params_; }
  int length() const { return sequence_length(cfg_.P, cfg_.T); }

  // Vocabulary size and mask of step i. The loc mask depends only on the
  // position, never on earlier tokens.
  int vocab_at(int i) const {
    switch (role_at(i)) {
      case TokenRole::loc: return loc_vocab(cfg_.P, cfg_.T);
      case TokenRole::adaptor: return kNumAdaptorOps;
      case TokenRole::aggregator: return kNumAggOps;
    }
    return 0;
  }
  std::vector<std::uint8_t> mask_at(int i) const {
    if (role_at(i) != TokenRole::loc) return {};
    const int cell = i / kTokensPerCell;
    return location_mask(cell / cfg_.P, cell % cfg_.P, cfg_.P, cfg_.T, cfg_.strict);
  }

  Sample sample(Rng& rng) const {
    ParamSet<Scalar> ps = params_;
    Tape<Scalar> tape;
    Sample s;
    unroll(tape, ps, 1, [&](int i, const Tensor<Scalar>& logp) {
      const int V = vocab_at(i);
      std::vector<double> p(static_cast<std::size_t>(V));
      for (int j = 0; j < V; ++j) p[static_cast<std::size_t>(j)] = std::exp(logp[static_cast<std::size_t>(j)]);
      const double u = rng.uniform();
      double acc = 0;
      int pick = -1;
      for (int j = 0; j < V; ++j) {
        if (p[static_cast<std::size_t>(j)] <= 0) continue;
        acc += p[static_cast<std::size_t>(j)];
        pick = j;
        if (u < acc) break;
      }
      double h = 0;
      for (int j = 0; j < V; ++j)
        if (p[static_cast<std::size_t>(j)] > 0) h -= p[static_cast<std::size_t>(j)] * logp[static_cast<std::size_t>(j)];
      s.tokens.push_back(pick);
      s.logp.push_back(logp[static_cast<std::size_t>(pick)]);
      s.entropy.push_back(h);
      s.probs.push_back(std::move(p));
      return std::vector<int>{pick};
    });
    return s;
  }

  // Records the batch on `tape` reading parameters from `ps` (normally
  // params()).
  Evaluation evaluate(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::vector<TokenSeq>& seqs) const {
    if (seqs.empty()) throw ContractError("controller: empty batch");
    for (const auto& s : seqs)
      if (static_cast<int>(s.size()) != length()) throw CodecError("controller: sequence length mismatch");
    const int B = static_cast<int>(seqs.size());
    return unroll(tape, ps, B, [&](int i, const Tensor<Scalar>&) {
      std::vector<int> col(static_cast<std::size_t>(B));
      for (int b = 0; b < B; ++b) col[static_cast<std::size_t>(b)] = seqs[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
      return col;
    });
  }

 private:
  int embed_rows() const { return loc_vocab(cfg_.P, cfg_.T) + kNumAdaptorOps + kNumAggOps + 1; }
  int embed_offset(int i) const {
    switch (role_at(i)) {
      case TokenRole::loc: return 0;
      case TokenRole::adaptor: return loc_vocab(cfg_.P, cfg_.T);
      case TokenRole::aggregator: return loc_vocab(cfg_.P, cfg_.T) + kNumAdaptorOps;
    }
    return 0;
  }
  const char* head_at(int i) const {
    switch (role_at(i)) {
      case TokenRole::loc: return "loc";
      case TokenRole::adaptor: return "adaptor";
      case TokenRole::aggregator: return "agg";
    }
    return "";
  }

  // choose(step, log-probs [B,V]) returns the B tokens fed back at the next step.
  Evaluation unroll(Tape<Scalar>& tape, ParamSet<Scalar>& ps, int B,
                    const std::function<std::vector<int>(int, const Tensor<Scalar>&)>& choose) const {
    const int H = cfg_.hidden;
    auto p = [&](const std::string& n) { return tape.param(ps.at(n)); };
    auto embed = p("ctrl.embed"), w = p("ctrl.lstm.w"), bias = p("ctrl.lstm.b");
    Var<Scalar> h = tape.constant(Tensor<Scalar>(Shape{B, H})), c = tape.constant(Tensor<Scalar>(Shape{B, H}));
    std::vector<int> prev(static_cast<std::size_t>(B), embed_rows() - 1);
    Evaluation ev;
    for (int i = 0; i < length(); ++i) {
      auto x = ops::gather_rows(embed, prev);
      auto gates = ops::linear(ops::concat(std::vector<Var<Scalar>>{x, h}), w, bias);
      auto ig = ops::sigmoid(ops::slice(gates, 0, H)), fg = ops::sigmoid(ops::slice(gates, H, H));
      auto gg = ops::tanh(ops::slice(gates, 2 * H, H)), og = ops::sigmoid(ops::slice(gates, 3 * H, H));
      c = ops::add(ops::mul(fg, c), ops::mul(ig, gg));
      h = ops::mul(og, ops::tanh(c));
      const std::string head = std::string("ctrl.head.") + head_at(i);
      auto logits = ops::linear(h, p(head + ".w"), p(head + ".b"));
      auto logp = ops::log_softmax(logits, 1, mask_at(i));
      auto tokens = choose(i, logp.value());
      ev.logp.push_back(ops::pick(logp, tokens));
      ev.entropy.push_back(ops::entropy_rows(logp));
      prev = tokens;
      for (auto& t : prev) t += embed_offset(i);
    }
    return ev;
  }

  ControllerConfig cfg_;
  ParamSet<Scalar> params_;
};

}  // namespace auxnas
