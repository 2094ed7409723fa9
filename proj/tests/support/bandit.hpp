#pragma once

#include "auxnas/ppo.hpp"

namespace auxnas::testing {

// Reward 1 when the first adaptor token of cell 0 is conv1x1, else 0.1.
inline double bandit_reward(const TokenSeq& s) { return s.at(2) == static_cast<int>(AdaptorOp::conv1x1) ? 1.0 : 0.1; }

struct BanditResult {
  int updates = 0;       // updates run until the target was reached (or the cap)
  double final_prob = 0;  // mean probability of the optimal token at step 2
  bool reached = false;
};

inline double optimal_prob(const Controller& ctrl, Rng& rng, int n = 64) {
  double s = 0;
  for (int i = 0; i < n; ++i) s += ctrl.sample(rng).probs.at(2).at(static_cast<std::size_t>(AdaptorOp::conv1x1));
  return s / n;
}

inline BanditResult run_bandit(std::uint64_t seed, int max_updates = 500, int batch = 16, double target = 0.9) {
  Controller ctrl(ControllerConfig{}, seed);
  Ppo ppo;
  Rng rng(seed, 77), probe(seed, 78);
  BanditResult r;
  for (int u = 0; u < max_updates; ++u) {
    std::vector<Transition> b;
    for (int i = 0; i < batch; ++i) {
      auto s = ctrl.sample(rng);
      b.push_back({s.tokens, s.logp, bandit_reward(s.tokens)});
    }
    ppo.update(ctrl, b);
    r.updates = u + 1;
    if ((u + 1) % 10 == 0 && optimal_prob(ctrl, probe) >= target) {
      r.reached = true;
      break;
    }
  }
  r.final_prob = optimal_prob(ctrl, probe, 256);
  r.reached = r.final_prob >= target;
  return r;
}

}  // namespace auxnas::testing
