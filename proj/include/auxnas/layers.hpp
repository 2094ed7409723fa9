#pragma once

#include <array>
#include <string>
#include <string_view>

#include "auxnas/ops.hpp"
#include "auxnas/params.hpp"
#include "auxnas/rng.hpp"

namespace auxnas {

// Forward context: the tape being recorded, the parameters read from, and the
// BatchNorm mode.
template <class T>
struct Ctx {
  Tape<T>& tape;
  ParamSet<T>& params;
  bool train = true;

  Var<T> p(const std::string& path) { return tape.param(params.at(path)); }
  Var<T> opt(const std::string& path) { return params.contains(path) ? p(path) : Var<T>{}; }
};

// Adaptor operator vocabulary. The numeric order is the controller token
// order and must not change.
enum class AdaptorOp : int {
  sep_conv3x3 = 0,
  conv1x1 = 1,
  sep_conv3x3_dil3 = 2,
  sep_conv3x3_dil6 = 3,
  skip_connect = 4,
  deform_conv3x3 = 5,
};
enum class AggOp : int { sum = 0, concat = 1 };

inline constexpr int kNumAdaptorOps = 6;
inline constexpr int kNumAggOps = 2;
inline constexpr int kOpVocabVersion = 1;

inline constexpr std::array<std::string_view, kNumAdaptorOps> kAdaptorNames = {
    "sep_conv3x3", "conv1x1", "sep_conv3x3_dil3", "sep_conv3x3_dil6", "skip_connect", "deform_conv3x3"};
inline constexpr std::array<std::string_view, kNumAggOps> kAggNames = {"sum", "concat"};

inline std::string_view name_of(AdaptorOp op) { return kAdaptorNames.at(static_cast<std::size_t>(op)); }
inline std::string_view name_of(AggOp op) { return kAggNames.at(static_cast<std::size_t>(op)); }

inline AggOp parse_agg(std::string_view s) {
  for (int i = 0; i < kNumAggOps; ++i)
    if (kAggNames[static_cast<std::size_t>(i)] == s) return static_cast<AggOp>(i);
  throw ConfigError("unknown aggregator: " + std::string(s));
}

namespace layers {

// ---------------------------------------------------------------------------
// Parameter registration

template <class T>
void init_conv(ParamSet<T>& ps, const std::string& name, int in, int out, int k, int groups, bool bias, Tag tag,
               Rng& rng) {
  ps.add(name + ".w", he_normal<T>({out, in / groups, k, k}, rng), tag);
  if (bias) ps.add(name + ".b", Tensor<T>(Shape{out}), tag);
}

template <class T>
void init_bn(ParamSet<T>& ps, const std::string& name, int channels, Tag tag) {
  ps.add(name + ".gamma", Tensor<T>(Shape{channels}, T(1)), tag);
  ps.add(name + ".beta", Tensor<T>(Shape{channels}), tag);
  ps.add(name + ".running_mean", Tensor<T>(Shape{channels}), tag, false);
  ps.add(name + ".running_var", Tensor<T>(Shape{channels}, T(1)), tag, false);
}

// ---------------------------------------------------------------------------
// Forward helpers

template <class T>
Var<T> conv(Ctx<T>& c, const std::string& name, Var<T> x, ops::Conv2dOpts o) {
  return ops::conv2d(x, c.p(name + ".w"), c.opt(name + ".b"), o);
}

template <class T>
Var<T> bn(Ctx<T>& c, const std::string& name, Var<T> x) {
  return ops::batch_norm(x, c.p(name + ".gamma"), c.p(name + ".beta"), &c.params.at(name + ".running_mean"),
                         &c.params.at(name + ".running_var"), {.train = c.train});
}

// conv (no bias) -> BN -> ReLU, registered under name.conv / name.bn.
struct ConvBnRelu {
  std::string name;
  int in = 0, out = 0, k = 1;
  ops::Conv2dOpts opts{};

  template <class T>
  void init(ParamSet<T>& ps, Tag tag, Rng& rng) const {
    init_conv(ps, name + ".conv", in, out, k, opts.groups, false, tag, rng);
    init_bn(ps, name + ".bn", out, tag);
  }
  template <class T>
  Var<T> operator()(Ctx<T>& c, Var<T> x) const {
    return ops::relu(bn(c, name + ".bn", conv(c, name + ".conv", x, opts)));
  }
};

inline ConvBnRelu conv3x3(std::string name, int in, int out, int stride = 1, int dilation = 1, int groups = 1) {
  return {std::move(name), in, out, 3, {.stride = stride, .pad = dilation, .dilation = dilation, .groups = groups}};
}
inline ConvBnRelu conv1x1(std::string name, int in, int out) { return {std::move(name), in, out, 1, {}}; }

// ---------------------------------------------------------------------------
// Adaptors

// 1x1 conv -> BN -> ReLU mapping any channel count to c_aux.
template <class T>
void init_basic_adaptor(ParamSet<T>& ps, const std::string& name, int in, int c_aux, Tag tag, Rng& rng) {
  conv1x1(name, in, c_aux).init(ps, tag, rng);
}
template <class T>
Var<T> basic_adaptor(Ctx<T>& c, const std::string& name, Var<T> x, int c_aux) {
  return conv1x1(name, x.dim(1), c_aux)(c, x);
}

inline int dilation_of(AdaptorOp op) {
  switch (op) {
    case AdaptorOp::sep_conv3x3_dil3: return 3;
    case AdaptorOp::sep_conv3x3_dil6: return 6;
    default: return 1;
  }
}

inline bool is_separable(AdaptorOp op) {
  return op == AdaptorOp::sep_conv3x3 || op == AdaptorOp::sep_conv3x3_dil3 || op == AdaptorOp::sep_conv3x3_dil6;
}

// skip_connect is an identity and is only defined when in == c_aux.
inline bool adaptor_accepts(AdaptorOp op, int in, int c_aux) { return op != AdaptorOp::skip_connect || in == c_aux; }

template <class T>
void init_adaptor(ParamSet<T>& ps, const std::string& name, AdaptorOp op, int in, int c_aux, Tag tag, Rng& rng) {
  if (!adaptor_accepts(op, in, c_aux))
    throw GenotypeError(name + ": skip_connect needs " + std::to_string(c_aux) + " input channels, got " +
                        std::to_string(in));
  if (is_separable(op)) {
    const int d = dilation_of(op);
    conv3x3(name + ".dw", in, in, 1, d, in).init(ps, tag, rng);
    conv1x1(name + ".pw", in, c_aux).init(ps, tag, rng);
  } else if (op == AdaptorOp::conv1x1) {
    conv1x1(name, in, c_aux).init(ps, tag, rng);
  } else if (op == AdaptorOp::deform_conv3x3) {
    // Offsets start at zero so the op begins as a plain 3x3 conv.
    ps.add(name + ".offset.w", Tensor<T>(Shape{18, in, 3, 3}), tag);
    ps.add(name + ".offset.b", Tensor<T>(Shape{18}), tag);
    init_conv(ps, name + ".conv", in, c_aux, 3, 1, false, tag, rng);
    init_bn(ps, name + ".bn", c_aux, tag);
  }
}

// Deformable 3x3 conv without BN/ReLU: offsets from a 3x3 conv, bilinear
// sampling with zero padding, then the 3x3 weight applied with stride 3 on the
// re-tiled samples.
template <class T>
Var<T> deform_conv3x3_raw(Ctx<T>& c, const std::string& name, Var<T> x) {
  const int H = x.dim(2), W = x.dim(3);
  auto offsets = conv(c, name + ".offset", x, {.pad = 1});
  auto pts = ops::deform_points(offsets, 3, 1);
  auto sampled = ops::grid_sample_bilinear(x, pts, 3 * H, 3 * W, ops::PadMode::zeros);
  return ops::conv2d(sampled, c.p(name + ".conv.w"), Var<T>{}, {.stride = 3});
}

template <class T>
Var<T> apply_adaptor(Ctx<T>& c, const std::string& name, AdaptorOp op, Var<T> x, int c_aux) {
  const int in = x.dim(1);
  if (is_separable(op)) {
    const int d = dilation_of(op);
    auto h = conv3x3(name + ".dw", in, in, 1, d, in)(c, x);
    return conv1x1(name + ".pw", in, c_aux)(c, h);
  }
  switch (op) {
    case AdaptorOp::conv1x1: return conv1x1(name, in, c_aux)(c, x);
    case AdaptorOp::skip_connect:
      if (in != c_aux) throw GenotypeError(name + ": skip_connect on " + std::to_string(in) + " channels");
      return x;
    case AdaptorOp::deform_conv3x3: return ops::relu(bn(c, name + ".bn", deform_conv3x3_raw(c, name, x)));
    default: break;
  }
  throw ContractError("unhandled adaptor op");
}

// ---------------------------------------------------------------------------
// Aggregators

template <class T>
void init_aggregate(ParamSet<T>& ps, const std::string& name, AggOp op, int c_aux, Tag tag, Rng& rng) {
  if (op == AggOp::concat) conv1x1(name + ".proj", 2 * c_aux, c_aux).init(ps, tag, rng);
}

template <class T>
Var<T> aggregate(Ctx<T>& c, const std::string& name, AggOp op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ContractError(name + ": aggregate operands differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (op == AggOp::sum) return ops::add(a, b);
  const int ch = a.dim(1);
  return conv1x1(name + ".proj", 2 * ch, ch)(c, ops::concat<T>({a, b}));
}

// ---------------------------------------------------------------------------
// ASPP: 1x1, two dilated 3x3 branches and an image-pooling branch,
// concatenated and projected back to `channels`.

inline constexpr std::array<int, 2> kAsppRates = {2, 4};

template <class T>
void init_aspp(ParamSet<T>& ps, const std::string& name, int channels, int branch, Tag tag, Rng& rng) {
  conv1x1(name + ".b0", channels, branch).init(ps, tag, rng);
  conv3x3(name + ".b1", channels, branch, 1, kAsppRates[0]).init(ps, tag, rng);
  conv3x3(name + ".b2", channels, branch, 1, kAsppRates[1]).init(ps, tag, rng);
  conv1x1(name + ".pool", channels, branch).init(ps, tag, rng);
  conv1x1(name + ".proj", 4 * branch, channels).init(ps, tag, rng);
}

template <class T>
Var<T> aspp(Ctx<T>& c, const std::string& name, Var<T> x, int branch) {
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto b0 = conv1x1(name + ".b0", C, branch)(c, x);
  auto b1 = conv3x3(name + ".b1", C, branch, 1, kAsppRates[0])(c, x);
  auto b2 = conv3x3(name + ".b2", C, branch, 1, kAsppRates[1])(c, x);
  auto pooled = ops::reduce(x, ops::Reduce::mean, {2, 3});
  auto b3 = ops::bilinear_resize(conv1x1(name + ".pool", C, branch)(c, pooled), H, W);
  return conv1x1(name + ".proj", 4 * branch, C)(c, ops::concat<T>({b0, b1, b2, b3}));
}

// Prediction head: 1x1 conv with bias, then bilinear resize.
template <class T>
void init_head(ParamSet<T>& ps, const std::string& name, int in, int out, Tag tag, Rng& rng) {
  init_conv(ps, name, in, out, 1, 1, true, tag, rng);
}

template <class T>
Var<T> head(Ctx<T>& c, const std::string& name, Var<T> x, int out_h, int out_w) {
  auto y = conv(c, name, x, {});
  if (y.dim(2) == out_h && y.dim(3) == out_w) return y;
  return ops::bilinear_resize(y, out_h, out_w);
}

}  // namespace layers
}  // namespace auxnas
