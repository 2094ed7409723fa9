#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "auxnas/params.hpp"

namespace auxnas::optim {

// lr0 * (1 - iter / max_iter)^0.9
inline double poly_lr(int iter, int max_iter, double lr0, double power = 0.9) {
  if (max_iter <= 0 || iter < 0 || iter > max_iter) throw ContractError("poly_lr: iter outside [0, max_iter]");
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / max_iter, power);
}

// SGD with momentum: v <- m v + g + wd theta; theta <- theta - lr v.
template <class T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9, double weight_decay = 1e-4) : momentum_(momentum), wd_(weight_decay) {}

  void step(ParamSet<T>& ps, double lr) {
    for (auto& [name, p] : ps) {
      if (!p.trainable) continue;
      if (p.grad.size() != p.value.size()) throw ContractError("sgd: missing gradient for " + name);
      auto& v = velocity_[name];
      if (v.empty()) v.assign(p.value.size(), T(0));
      const T m = static_cast<T>(momentum_), wd = static_cast<T>(wd_), eta = static_cast<T>(lr);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = m * v[i] + p.grad[i] + wd * p.value[i];
        p.value[i] -= eta * v[i];
      }
    }
  }

 private:
  double momentum_, wd_;
  std::map<std::string, std::vector<T>> velocity_;
};

template <class T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamSet<T>& ps) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, p] : ps) {
      if (!p.trainable) continue;
      if (p.grad.size() != p.value.size()) throw ContractError("adam: missing gradient for " + name);
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.value.size(), 0.0);
        st.v.assign(p.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        st.m[i] = b1_ * st.m[i] + (1 - b1_) * g;
        st.v[i] = b2_ * st.v[i] + (1 - b2_) * g * g;
        const double mh = st.m[i] / c1, vh = st.v[i] / c2;
        p.value[i] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  int steps() const { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace auxnas::optim
