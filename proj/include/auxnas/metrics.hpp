#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "auxnas/tensor.hpp"

namespace auxnas::metrics {

// Confusion-matrix accumulator. mIoU averages TP/(TP+FP+FN) over classes
// present in ground truth or prediction; ignored pixels never count.
struct SegMeter {
  int K;
  int ignore;
  std::vector<std::uint64_t> conf;  // conf[gt * K + pred]

  explicit SegMeter(int classes, int ignore_index = 255)
      : K(classes), ignore(ignore_index), conf(static_cast<std::size_t>(classes) * classes, 0) {}

  void add(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size()) throw DimensionError("segmentation metric: size mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (gt[i] < 0 || gt[i] >= K || pred[i] < 0 || pred[i] >= K) throw DataError("label outside class range");
      ++conf[static_cast<std::size_t>(gt[i]) * K + pred[i]];
    }
  }

  double miou() const {
    double sum = 0;
    int present = 0;
    for (int c = 0; c < K; ++c) {
      std::uint64_t tp = conf[static_cast<std::size_t>(c) * K + c], fp = 0, fn = 0;
      for (int o = 0; o < K; ++o) {
        if (o == c) continue;
        fn += conf[static_cast<std::size_t>(c) * K + o];
        fp += conf[static_cast<std::size_t>(o) * K + c];
      }
      const std::uint64_t denom = tp + fp + fn;
      if (denom == 0) continue;
      sum += static_cast<double>(tp) / static_cast<double>(denom);
      ++present;
    }
    return present ? sum / present : 0.0;
  }

  double pixel_acc() const {
    std::uint64_t correct = 0, total = 0;
    for (int g = 0; g < K; ++g)
      for (int p = 0; p < K; ++p) {
        const auto v = conf[static_cast<std::size_t>(g) * K + p];
        total += v;
        if (g == p) correct += v;
      }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
};

struct DepthMeter {
  double abs_rel = 0, sq = 0;
  std::uint64_t n = 0;

  template <class T>
  void add(const std::vector<T>& pred, const std::vector<T>& gt) {
    if (pred.size() != gt.size()) throw DimensionError("depth metric: size mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const double g = gt[i], d = static_cast<double>(pred[i]) - g;
      if (!(g > 0)) continue;
      abs_rel += std::abs(d) / g;
      sq += d * d;
      ++n;
    }
  }
  double rel() const { return n ? abs_rel / static_cast<double>(n) : 0.0; }
  double rms() const { return n ? std::sqrt(sq / static_cast<double>(n)) : 0.0; }
};

// Mean angular error in degrees. Inputs are N x 3 x H x W flattened.
struct NormalMeter {
  double deg = 0;
  std::uint64_t n = 0;

  template <class T>
  void add(const std::vector<T>& pred, const std::vector<T>& gt, int N, std::size_t HW) {
    if (pred.size() != gt.size() || gt.size() != static_cast<std::size_t>(N) * 3 * HW)
      throw DimensionError("normal metric: size mismatch");
    for (int b = 0; b < N; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        double dot = 0;
        for (int c = 0; c < 3; ++c) {
          const std::size_t k = (static_cast<std::size_t>(b) * 3 + c) * HW + i;
          dot += static_cast<double>(pred[k]) * static_cast<double>(gt[k]);
        }
        deg += std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi;
        ++n;
      }
  }
  double mean_angle() const { return n ? deg / static_cast<double>(n) : 0.0; }
};

inline double miou(const std::vector<int>& pred, const std::vector<int>& gt, int K, int ignore = 255) {
  SegMeter m(K, ignore);
  m.add(pred, gt);
  return m.miou();
}
inline double pixel_acc(const std::vector<int>& pred, const std::vector<int>& gt, int K, int ignore = 255) {
  SegMeter m(K, ignore);
  m.add(pred, gt);
  return m.pixel_acc();
}
template <class T>
double rel(const std::vector<T>& pred, const std::vector<T>& gt) {
  DepthMeter m;
  m.add(pred, gt);
  return m.rel();
}
template <class T>
double rms(const std::vector<T>& pred, const std::vector<T>& gt) {
  DepthMeter m;
  m.add(pred, gt);
  return m.rms();
}
template <class T>
double mean_angle(const std::vector<T>& pred, const std::vector<T>& gt, int N, std::size_t HW) {
  NormalMeter m;
  m.add(pred, gt, N, HW);
  return m.mean_angle();
}

// Per-pixel argmax over channels of N x K x H x W logits.
template <class T>
std::vector<int> argmax_channels(const Tensor<T>& logits) {
  const int N = logits.dim(0), K = logits.dim(1);
  const std::size_t HW = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  std::vector<int> out(static_cast<std::size_t>(N) * HW);
  for (int b = 0; b < N; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      int best = 0;
      T bv = logits[static_cast<std::size_t>(b) * K * HW + i];
      for (int k = 1; k < K; ++k) {
        const T v = logits[(static_cast<std::size_t>(b) * K + k) * HW + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(b) * HW + i] = best;
    }
  return out;
}

}  // namespace auxnas::metrics
