#pragma once

#include <cmath>
#include <vector>

#include "auxnas/controller.hpp"
#include "auxnas/optim.hpp"

namespace auxnas {

struct PpoConfig {
  double clip = 0.2;
  int epochs = 4;
  double entropy_coef = 0.01;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double baseline_decay = 0.95;
};

struct Transition {
  TokenSeq tokens;
  std::vector<double> old_logp;  // per token, from the sampling policy
  double reward = 0;
};

struct PpoStats {
  std::vector<double> surrogate;  // clipped surrogate loss (before entropy) at the start of each epoch
  double baseline_before = 0, baseline_after = 0;
  std::vector<double> advantages;
};

// Clipped-ratio policy optimisation with an exponential-moving-average reward
// baseline. The baseline starts at the first batch's mean reward.
class Ppo {
 public:
  explicit Ppo(PpoConfig cfg = {}) : cfg_(cfg), adam_(cfg.lr, cfg.beta1, cfg.beta2) {}

  const PpoConfig& config() const { return cfg_; }
  bool has_baseline() const { return has_baseline_; }
  double baseline() const { return baseline_; }

  PpoStats update(Controller& ctrl, const std::vector<Transition>& batch) {
    if (batch.empty()) throw ContractError("ppo: empty batch");
    const int B = static_cast<int>(batch.size()), L = ctrl.length();
    double mean_r = 0;
    for (const auto& tr : batch) {
      if (static_cast<int>(tr.tokens.size()) != L || static_cast<int>(tr.old_logp.size()) != L)
        throw ContractError("ppo: transition length mismatch");
      mean_r += tr.reward;
    }
    mean_r /= B;
    if (!has_baseline_) {
      baseline_ = mean_r;
      has_baseline_ = true;
    }
    PpoStats st;
    st.baseline_before = baseline_;
    for (const auto& tr : batch) st.advantages.push_back(tr.reward - baseline_);

    std::vector<TokenSeq> seqs;
    for (const auto& tr : batch) seqs.push_back(tr.tokens);
    const double lo = 1 - cfg_.clip, hi = 1 + cfg_.clip, norm = 1.0 / (static_cast<double>(B) * L);
    auto& ps = ctrl.params();
    for (int e = 0; e < cfg_.epochs; ++e) {
      Tape<double> tape;
      auto ev = ctrl.evaluate(tape, ps, seqs);
      Var<double> loss;
      double surrogate = 0;
      for (int i = 0; i < L; ++i) {
        // min(r A, clip(r) A) per token: the unclipped branch keeps r A on the
        // tape, the saturated branch is a constant.
        Tensor<double> old(Shape{B, 1}), coef(Shape{B, 1}), constant(Shape{B, 1});
        const auto& lp = ev.logp[static_cast<std::size_t>(i)].value();
        for (int b = 0; b < B; ++b) {
          const auto k = static_cast<std::size_t>(b);
          const double A = st.advantages[k];
          old[k] = batch[k].old_logp[static_cast<std::size_t>(i)];
          const double r = std::exp(lp[k] - old[k]);
          const bool saturated = (A >= 0 && r > hi) || (A < 0 && r < lo);
          if (saturated) constant[k] = (A >= 0 ? hi : lo) * A;
          else coef[k] = A;
          surrogate -= (saturated ? constant[k] : r * A) * norm;
        }
        auto ratio = ops::exp(ops::sub(ev.logp[static_cast<std::size_t>(i)], tape.constant(old)));
        auto term = ops::add(ops::mul(ratio, tape.constant(coef)), tape.constant(constant));
        if (cfg_.entropy_coef != 0.0)
          term = ops::add(term, ops::scale(ev.entropy[static_cast<std::size_t>(i)], cfg_.entropy_coef));
        auto s = ops::sum_all(term);
        loss = loss.valid() ? ops::add(loss, s) : s;
      }
      st.surrogate.push_back(surrogate);
      loss = ops::scale(loss, -norm);
      ps.zero_grad();
      tape.backward(loss);
      adam_.step(ps);
    }
    baseline_ = cfg_.baseline_decay * baseline_ + (1 - cfg_.baseline_decay) * mean_r;
    st.baseline_after = baseline_;
    return st;
  }

  // Surrogate loss of the current policy on a batch, for diagnostics.
  double surrogate(Controller& ctrl, const std::vector<Transition>& batch, const std::vector<double>& adv) const {
    Tape<double> tape;
    std::vector<TokenSeq> seqs;
    for (const auto& tr : batch) seqs.push_back(tr.tokens);
    auto ev = ctrl.evaluate(tape, ctrl.params(), seqs);
    const int B = static_cast<int>(batch.size()), L = ctrl.length();
    double s = 0;
    for (int i = 0; i < L; ++i)
      for (int b = 0; b < B; ++b) {
        const auto k = static_cast<std::size_t>(b);
        const double r = std::exp(ev.logp[static_cast<std::size_t>(i)].value()[k] - batch[k].old_logp[static_cast<std::size_t>(i)]);
        const double clipped = std::min(std::max(r, 1 - cfg_.clip), 1 + cfg_.clip);
        s -= std::min(r * adv[k], clipped * adv[k]);
      }
    return s / (static_cast<double>(B) * L);
  }

 private:
  PpoConfig cfg_;
  optim::Adam<double> adam_;
  double baseline_ = 0;
  bool has_baseline_ = false;
};

}  // namespace auxnas
