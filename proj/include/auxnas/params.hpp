#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "auxnas/rng.hpp"
#include "auxnas/tensor.hpp"

namespace auxnas {

// Which partition of the joint objective a parameter belongs to.
enum class Group { shared, task, aux, controller };

struct Tag {
  Group group = Group::shared;
  int task = 0;  // 1-based task id for task/aux tags, 0 otherwise

  static Tag shared() { return {Group::shared, 0}; }
  static Tag task_of(int t) { return {Group::task, t}; }
  static Tag aux_of(int t) { return {Group::aux, t}; }
  static Tag controller() { return {Group::controller, 0}; }

  bool operator==(const Tag&) const = default;
};

inline std::string to_string(const Tag& tag) {
  switch (tag.group) {
    case Group::shared: return "shared";
    case Group::task: return "task(" + std::to_string(tag.task) + ")";
    case Group::aux: return "aux(" + std::to_string(tag.task) + ")";
    case Group::controller: return "controller";
  }
  return "?";
}

template <class T>
struct Param {
  Tensor<T> value;
  std::vector<T> grad;  // same length as value once touched; empty means "no grad yet"
  Tag tag;
  bool trainable = true;  // false for running statistics

  void zero_grad() { grad.assign(value.size(), T(0)); }
};

// Named parameters keyed by path. std::map keeps iteration order and element
// addresses stable, both of which the tape and the optimizers rely on.
template <class T>
class ParamSet {
 public:
  Param<T>& add(const std::string& path, Tensor<T> value, Tag tag, bool trainable = true) {
    auto [it, inserted] = items_.try_emplace(path);
    if (!inserted) throw ConfigError("duplicate parameter path: " + path);
    it->second.value = std::move(value);
    it->second.tag = tag;
    it->second.trainable = trainable;
    return it->second;
  }

  bool contains(const std::string& path) const { return items_.count(path) != 0; }

  Param<T>& at(const std::string& path) {
    auto it = items_.find(path);
    if (it == items_.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second;
  }
  const Param<T>& at(const std::string& path) const {
    auto it = items_.find(path);
    if (it == items_.end()) throw ConfigError("unknown parameter path: " + path);
    return it->second;
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [k, _] : items_) out.push_back(k);
    return out;
  }

  std::size_t count_if(const std::function<bool(const Param<T>&)>& pred) const {
    std::size_t n = 0;
    for (const auto& [_, p] : items_)
      if (pred(p)) ++n;
    return n;
  }

  // Total scalar count over entries matching pred.
  std::size_t scalars_if(const std::function<bool(const Param<T>&)>& pred) const {
    std::size_t n = 0;
    for (const auto& [_, p] : items_)
      if (pred(p)) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : items_) p.grad.assign(p.value.size(), T(0));
  }

  ParamSet filter(const std::function<bool(const std::string&, const Param<T>&)>& keep) const {
    ParamSet out;
    for (const auto& [k, p] : items_)
      if (keep(k, p)) out.items_.emplace(k, p);
    return out;
  }

  void erase_if(const std::function<bool(const std::string&, const Param<T>&)>& drop) {
    for (auto it = items_.begin(); it != items_.end();) {
      if (drop(it->first, it->second))
        it = items_.erase(it);
      else
        ++it;
    }
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, p] : items_) out.add(k, p.value.template cast<U>(), p.tag, p.trainable);
    return out;
  }

 private:
  std::map<std::string, Param<T>> items_;
};

// He-normal initialisation for a conv weight [O, I, k, k].
template <class T>
Tensor<T> he_normal(const Shape& shape, Rng& rng) {
  Tensor<T> t(shape);
  int fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  double std = std::sqrt(2.0 / std::max(1, fan_in));
  for (auto& v : t.values) v = static_cast<T>(rng.normal() * std);
  return t;
}

template <class T>
Tensor<T> uniform_init(const Shape& shape, Rng& rng, double bound) {
  Tensor<T> t(shape);
  for (auto& v : t.values) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace auxnas
