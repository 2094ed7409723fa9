#pragma once

#include <vector>

#include "auxnas/mtl_net.hpp"

namespace auxnas {

inline constexpr int kIgnoreLabel = 255;

// Dense targets for one batch; each field is used only by the matching task.
template <class T>
struct Targets {
  std::vector<int> seg;  // N*H*W labels, kIgnoreLabel = ignore
  Tensor<T> depth;       // N x 1 x H x W, positive
  Tensor<T> normal;      // N x 3 x H x W, unit
};

// Mean cross-entropy over non-ignored pixels.
template <class T>
Var<T> loss_segmentation(Var<T> logits, const std::vector<int>& labels, int ignore = kIgnoreLabel) {
  return ops::nll_loss(ops::log_softmax(logits, 1), labels, ignore);
}

// Mean absolute error.
template <class T>
Var<T> loss_depth(Var<T> pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape) throw DimensionError("loss_depth: " + to_string(pred.shape()) + " vs " + to_string(gt.shape));
  for (T v : gt.values)
    if (!(v > T(0))) throw DataError("depth ground truth must be positive");
  return ops::mean_all(ops::abs(ops::sub(pred, pred.tape->constant(gt))));
}

// Mean over pixels of 1 - <pred, gt>.
template <class T>
Var<T> loss_normal(Var<T> pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape) throw DimensionError("loss_normal: " + to_string(pred.shape()) + " vs " + to_string(gt.shape));
  const auto& s = gt.shape;
  const T pixels = static_cast<T>(s[0]) * s[2] * s[3];
  auto dot = ops::sum_all(ops::mul(pred, pred.tape->constant(gt)));
  return ops::add_scalar(ops::scale(dot, T(-1) / pixels), T(1));
}

template <class T>
Var<T> task_loss(const TaskSpec& task, Var<T> pred, const Targets<T>& y) {
  switch (task.kind) {
    case TaskKind::segmentation: return loss_segmentation(pred, y.seg);
    case TaskKind::depth: return loss_depth(pred, y.depth);
    case TaskKind::normal: return loss_normal(pred, y.normal);
  }
  throw ContractError("unknown task kind");
}

// Uncertainty weighting with log-variance s: exp(-s) * L + s / 2.
template <class T>
Var<T> kendall_term(Var<T> loss, Var<T> s) {
  return ops::add(ops::mul(ops::exp(ops::scale(s, T(-1))), loss), ops::scale(s, T(0.5)));
}

}  // namespace auxnas
