#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "auxnas/losses.hpp"
#include "auxnas/rng.hpp"
#include "auxnas/tensor_io.hpp"

namespace auxnas::data {

struct Sample {
  Tensor<float> image;         // 3 x H x W in [0, 1]
  Tensor<std::int32_t> seg;    // H x W, 0..K-1 or 255
  Tensor<float> depth;         // H x W, positive
  Tensor<float> normal;        // 3 x H x W, unit per pixel

  int height() const { return depth.dim(0); }
  int width() const { return depth.dim(1); }
};

struct GenConfig {
  std::uint64_t seed = 0;
  int n = 1280;
  int height = 32;
  int width = 32;
  int classes = 5;
  double val_fraction = 0.2;
  double test_fraction = 0.0;
  double meta_val_fraction = 0.2;  // carved from train
};

struct Splits {
  std::vector<int> train, meta_train, meta_val, val, test;
};

// ---------------------------------------------------------------------------
// Geometry

// n ~ (-dd/dx, -dd/dy, 1) from central differences with replicated borders.
inline Tensor<float> derive_normals(const Tensor<float>& depth) {
  const int H = depth.dim(0), W = depth.dim(1);
  Tensor<float> n(Shape{3, H, W});
  auto d = [&](int y, int x) {
    return static_cast<double>(depth[static_cast<std::size_t>(std::clamp(y, 0, H - 1)) * W + std::clamp(x, 0, W - 1)]);
  };
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gx = (d(y, x + 1) - d(y, x - 1)) / 2.0;
      const double gy = (d(y + 1, x) - d(y - 1, x)) / 2.0;
      const double inv = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      n[i] = static_cast<float>(-gx * inv);
      n[HW + i] = static_cast<float>(-gy * inv);
      n[2 * HW + i] = static_cast<float>(inv);
    }
  return n;
}

inline void renormalize(Tensor<float>& n) {
  const std::size_t HW = n.size() / 3;
  for (std::size_t i = 0; i < HW; ++i) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += static_cast<double>(n[c * HW + i]) * n[c * HW + i];
    if (s <= 0) {
      n[i] = 0, n[HW + i] = 0, n[2 * HW + i] = 1;
      continue;
    }
    const double inv = 1.0 / std::sqrt(s);
    for (int c = 0; c < 3; ++c) n[c * HW + i] = static_cast<float>(n[c * HW + i] * inv);
  }
}

// 3x3 box filter with replicated borders.
inline Tensor<float> box3(const Tensor<float>& d) {
  const int H = d.dim(0), W = d.dim(1);
  Tensor<float> out(d.shape);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          s += d[static_cast<std::size_t>(std::clamp(y + dy, 0, H - 1)) * W + std::clamp(x + dx, 0, W - 1)];
      out[static_cast<std::size_t>(y) * W + x] = static_cast<float>(s / 9.0);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

inline std::array<float, 3> class_albedo(int cls) {
  static constexpr std::array<std::array<float, 3>, 8> palette = {{{0.55f, 0.55f, 0.55f},
                                                                   {0.90f, 0.25f, 0.20f},
                                                                   {0.20f, 0.80f, 0.30f},
                                                                   {0.25f, 0.35f, 0.95f},
                                                                   {0.95f, 0.85f, 0.20f},
                                                                   {0.80f, 0.30f, 0.85f},
                                                                   {0.20f, 0.85f, 0.85f},
                                                                   {0.95f, 0.60f, 0.30f}}};
  return palette[static_cast<std::size_t>(cls) % palette.size()];
}

// One scene from (seed, index): tilted background plane plus 1..4 rectangles
// or disks, each with a foreground class, a constant depth offset and its own
// albedo. The image is albedo shaded by depth.
inline Sample generate_sample(std::uint64_t seed, int index, int H, int W, int K) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)), 0x5eed);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Tensor<float> depth(Shape{H, W});
  Tensor<std::int32_t> seg(Shape{H, W});
  std::vector<std::array<float, 3>> albedo(HW);

  const double base = rng.uniform(2.0, 4.0), gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
  const auto bg = class_albedo(0);
  const float bg_jit = static_cast<float>(rng.uniform(-0.1, 0.1));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      depth[i] = static_cast<float>(base + gx * ((x + 0.5) / W - 0.5) + gy * ((y + 0.5) / H - 0.5));
      albedo[i] = {bg[0] + bg_jit, bg[1] + bg_jit, bg[2] + bg_jit};
    }

  const int shapes = 1 + static_cast<int>(rng.below(4));
  for (int s = 0; s < shapes; ++s) {
    const int cls = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(K - 1)));
    const bool disk = rng.bernoulli(0.5);
    const double cy = rng.uniform(0.15, 0.85) * H, cx = rng.uniform(0.15, 0.85) * W;
    const double ry = rng.uniform(0.1, 0.3) * H, rx = rng.uniform(0.1, 0.3) * W;
    const double offset = -rng.uniform(0.3, 1.2);
    auto a = class_albedo(cls);
    for (auto& v : a) v = std::clamp(v + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.0f, 1.0f);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
        const bool inside = disk ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        seg[i] = cls;
        depth[i] = static_cast<float>(std::max(0.3, base + gx * ((x + 0.5) / W - 0.5) + gy * ((y + 0.5) / H - 0.5) + offset));
        albedo[i] = a;
      }
  }

  Sample smp;
  smp.depth = box3(depth);
  smp.seg = std::move(seg);
  smp.normal = derive_normals(smp.depth);
  smp.image = Tensor<float>(Shape{3, H, W});
  for (std::size_t i = 0; i < HW; ++i) {
    const double shade = std::exp(-0.3 * (smp.depth[i] - 1.0)) * (0.6 + 0.4 * smp.normal[2 * HW + i]);
    for (int c = 0; c < 3; ++c) {
      const double noise = rng.uniform(-0.02, 0.02);
      smp.image[c * HW + i] = static_cast<float>(std::clamp(albedo[i][static_cast<std::size_t>(c)] * shade + noise, 0.0, 1.0));
    }
  }
  return smp;
}

inline Splits make_splits(const GenConfig& g) {
  std::vector<int> perm(static_cast<std::size_t>(g.n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(g.seed, 0x5911ull), 7);
  for (int i = g.n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint32_t>(i + 1))]);
  const int n_val = static_cast<int>(std::floor(g.n * g.val_fraction));
  const int n_test = static_cast<int>(std::floor(g.n * g.test_fraction));
  if (n_val + n_test >= g.n && g.n > 1) throw ConfigError("val and test fractions leave no training samples");
  Splits s;
  auto take = [&](int from, int count) {
    std::vector<int> v(perm.begin() + from, perm.begin() + from + count);
    std::sort(v.begin(), v.end());
    return v;
  };
  s.val = take(0, n_val);
  s.test = take(n_val, n_test);
  // train keeps permutation order so the meta carve is random too
  std::vector<int> train(perm.begin() + n_val + n_test, perm.end());
  const int n_mval = static_cast<int>(std::floor(static_cast<double>(train.size()) * g.meta_val_fraction));
  s.meta_val = std::vector<int>(train.end() - n_mval, train.end());
  s.meta_train = std::vector<int>(train.begin(), train.end() - n_mval);
  std::sort(s.meta_val.begin(), s.meta_val.end());
  std::sort(s.meta_train.begin(), s.meta_train.end());
  std::sort(train.begin(), train.end());
  s.train = std::move(train);
  return s;
}

inline std::string file_name(int idx, const char* kind) { return std::to_string(idx) + "_" + kind + ".tnsr"; }

inline void gen_synthetic(const GenConfig& g, const std::filesystem::path& dir) {
  if (g.n < 1) throw ConfigError("dataset size n must be >= 1");
  if (g.height < 1 || g.width < 1) throw ConfigError("image size must be positive");
  if (g.classes < 2) throw ConfigError("need at least 2 classes");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json files = nlohmann::json::array();
  for (int i = 0; i < g.n; ++i) {
    Sample s = generate_sample(g.seed, i, g.height, g.width, g.classes);
    io::write_tensor_file(dir / file_name(i, "img"), s.image);
    io::write_tensor_file(dir / file_name(i, "seg"), s.seg);
    io::write_tensor_file(dir / file_name(i, "dep"), s.depth);
    io::write_tensor_file(dir / file_name(i, "nrm"), s.normal);
    files.push_back({{"img", file_name(i, "img")}, {"seg", file_name(i, "seg")}, {"dep", file_name(i, "dep")},
                     {"nrm", file_name(i, "nrm")}});
  }
  const Splits sp = make_splits(g);
  nlohmann::json m = {{"n", g.n},
                      {"H", g.height},
                      {"W", g.width},
                      {"K", g.classes},
                      {"seed", g.seed},
                      {"splits",
                       {{"train", sp.train},
                        {"meta_train", sp.meta_train},
                        {"meta_val", sp.meta_val},
                        {"val", sp.val},
                        {"test", sp.test}}},
                      {"files", files}};
  io::write_file(dir / "manifest.json", m.dump(2) + "\n");
}

struct Dataset {
  int n = 0, height = 0, width = 0, classes = 0;
  std::uint64_t seed = 0;
  Splits splits;
  std::vector<Sample> samples;

  const std::vector<int>& split(const std::string& name) const {
    if (name == "train") return splits.train;
    if (name == "meta_train") return splits.meta_train;
    if (name == "meta_val") return splits.meta_val;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw ConfigError("unknown split " + name);
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto text = io::read_file(dir / "manifest.json");
  Dataset d;
  try {
    const auto m = nlohmann::json::parse(text);
    d.n = m.at("n").get<int>();
    d.height = m.at("H").get<int>();
    d.width = m.at("W").get<int>();
    d.classes = m.at("K").get<int>();
    d.seed = m.at("seed").get<std::uint64_t>();
    const auto& s = m.at("splits");
    d.splits = {s.at("train").get<std::vector<int>>(), s.at("meta_train").get<std::vector<int>>(),
                s.at("meta_val").get<std::vector<int>>(), s.at("val").get<std::vector<int>>(),
                s.at("test").get<std::vector<int>>()};
    const auto& files = m.at("files");
    if (static_cast<int>(files.size()) != d.n) throw DataError("manifest lists " + std::to_string(files.size()) + " samples");
    for (const auto& f : files) {
      Sample smp;
      smp.image = io::read_tensor_as<float>(dir / f.at("img").get<std::string>());
      smp.seg = io::read_tensor_as<std::int32_t>(dir / f.at("seg").get<std::string>());
      smp.depth = io::read_tensor_as<float>(dir / f.at("dep").get<std::string>());
      smp.normal = io::read_tensor_as<float>(dir / f.at("nrm").get<std::string>());
      if (smp.image.shape != Shape{3, d.height, d.width} || smp.seg.shape != Shape{d.height, d.width} ||
          smp.depth.shape != Shape{d.height, d.width} || smp.normal.shape != Shape{3, d.height, d.width})
        throw DataError("sample tensors do not match manifest size");
      d.samples.push_back(std::move(smp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  for (const auto* sp : {&d.splits.train, &d.splits.meta_train, &d.splits.meta_val, &d.splits.val, &d.splits.test})
    for (int i : *sp)
      if (i < 0 || i >= d.n) throw DataError("split index out of range");
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double flip_p = 0.5;
  double scale_min = 0.5;
  double scale_max = 2.1;
  int crop_h = 32;
  int crop_w = 32;
};

// Half-pixel bilinear resize of a C x H x W buffer.
inline Tensor<float> resize_bilinear(const Tensor<float>& x, int oh, int ow) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<float> out(Shape{C, oh, ow});
  auto axis = [](int in, int out_len, int o, int& i0, int& i1, double& f) {
    double src = (o + 0.5) * in / out_len - 0.5;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<int>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    f = src - i0;
  };
  for (int y = 0; y < oh; ++y) {
    int y0, y1;
    double fy;
    axis(H, oh, y, y0, y1, fy);
    for (int xo = 0; xo < ow; ++xo) {
      int x0, x1;
      double fx;
      axis(W, ow, xo, x0, x1, fx);
      for (int c = 0; c < C; ++c) {
        auto at = [&](int yy, int xx) { return static_cast<double>(x[(static_cast<std::size_t>(c) * H + yy) * W + xx]); };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        out[(static_cast<std::size_t>(c) * oh + y) * ow + xo] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Tensor<std::int32_t> resize_nearest(const Tensor<std::int32_t>& x, int oh, int ow) {
  const int H = x.dim(0), W = x.dim(1);
  Tensor<std::int32_t> out(Shape{oh, ow});
  for (int y = 0; y < oh; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * H / oh), H - 1);
    for (int xo = 0; xo < ow; ++xo) {
      const int sx = std::min(static_cast<int>((xo + 0.5) * W / ow), W - 1);
      out[static_cast<std::size_t>(y) * ow + xo] = x[static_cast<std::size_t>(sy) * W + sx];
    }
  }
  return out;
}

inline Sample flip_horizontal(const Sample& s) {
  const int H = s.height(), W = s.width();
  Sample o = s;
  auto flip = [&](const auto& src, auto& dst, int C) {
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          dst[(static_cast<std::size_t>(c) * H + y) * W + x] = src[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
  };
  flip(s.image, o.image, 3);
  flip(s.seg, o.seg, 1);
  flip(s.depth, o.depth, 1);
  flip(s.normal, o.normal, 3);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  for (std::size_t i = 0; i < HW; ++i) o.normal[i] = -o.normal[i];
  return o;
}

// Scales every modality by s; depth is divided by s (the scene appears s
// times closer).
inline Sample rescale(const Sample& s, double scale) {
  const int H = s.height(), W = s.width();
  const int oh = std::max(1, static_cast<int>(std::lround(H * scale)));
  const int ow = std::max(1, static_cast<int>(std::lround(W * scale)));
  Sample o;
  o.image = resize_bilinear(s.image, oh, ow);
  o.seg = resize_nearest(s.seg, oh, ow);
  Tensor<float> d3 = s.depth;
  d3.shape = {1, H, W};
  o.depth = resize_bilinear(d3, oh, ow);
  o.depth.shape = {oh, ow};
  for (auto& v : o.depth.values) v = static_cast<float>(v / scale);
  o.normal = resize_bilinear(s.normal, oh, ow);
  renormalize(o.normal);
  return o;
}

// Crop window at (oy, ox); outside the source the image is 0, labels are
// ignore, and depth / normals replicate the nearest edge.
inline Sample crop(const Sample& s, int oy, int ox, int ch, int cw) {
  const int H = s.height(), W = s.width();
  Sample o;
  o.image = Tensor<float>(Shape{3, ch, cw});
  o.seg = Tensor<std::int32_t>(Shape{ch, cw}, kIgnoreLabel);
  o.depth = Tensor<float>(Shape{ch, cw});
  o.normal = Tensor<float>(Shape{3, ch, cw});
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) {
      const int sy = y + oy, sx = x + ox;
      const bool inside = sy >= 0 && sy < H && sx >= 0 && sx < W;
      const int cy = std::clamp(sy, 0, H - 1), cx = std::clamp(sx, 0, W - 1);
      const std::size_t o_i = static_cast<std::size_t>(y) * cw + x, s_i = static_cast<std::size_t>(cy) * W + cx;
      const std::size_t oHW = static_cast<std::size_t>(ch) * cw, sHW = static_cast<std::size_t>(H) * W;
      if (inside) {
        for (int c = 0; c < 3; ++c) o.image[c * oHW + o_i] = s.image[c * sHW + s_i];
        o.seg[o_i] = s.seg[s_i];
      }
      o.depth[o_i] = s.depth[s_i];
      for (int c = 0; c < 3; ++c) o.normal[c * oHW + o_i] = s.normal[c * sHW + s_i];
    }
  return o;
}

inline Sample augment(const Sample& s, Rng& rng, const AugmentConfig& cfg) {
  Sample cur = rng.bernoulli(cfg.flip_p) ? flip_horizontal(s) : s;
  cur = rescale(cur, rng.uniform(cfg.scale_min, cfg.scale_max));
  const int H = cur.height(), W = cur.width();
  auto offset = [&](int len, int want) {
    if (len >= want) return static_cast<int>(rng.below(static_cast<std::uint32_t>(len - want + 1)));
    return -static_cast<int>(rng.below(static_cast<std::uint32_t>(want - len + 1)));
  };
  const int oy = offset(H, cfg.crop_h), ox = offset(W, cfg.crop_w);
  return crop(cur, oy, ox, cfg.crop_h, cfg.crop_w);
}

// ---------------------------------------------------------------------------
// Batches

template <class T>
struct Batch {
  Tensor<T> images;  // N x 3 x H x W
  Targets<T> targets;
  int size() const { return images.dim(0); }
};

template <class T>
Batch<T> collate(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("empty batch");
  const int N = static_cast<int>(samples.size()), H = samples[0].height(), W = samples[0].width();
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Batch<T> b;
  b.images = Tensor<T>(Shape{N, 3, H, W});
  b.targets.depth = Tensor<T>(Shape{N, 1, H, W});
  b.targets.normal = Tensor<T>(Shape{N, 3, H, W});
  b.targets.seg.resize(static_cast<std::size_t>(N) * HW);
  for (int n = 0; n < N; ++n) {
    const auto& s = samples[static_cast<std::size_t>(n)];
    if (s.height() != H || s.width() != W) throw DimensionError("batch samples differ in size");
    const std::size_t o3 = static_cast<std::size_t>(n) * 3 * HW, o1 = static_cast<std::size_t>(n) * HW;
    for (std::size_t i = 0; i < 3 * HW; ++i) {
      b.images[o3 + i] = static_cast<T>(s.image[i]);
      b.targets.normal[o3 + i] = static_cast<T>(s.normal[i]);
    }
    for (std::size_t i = 0; i < HW; ++i) {
      b.targets.depth[o1 + i] = static_cast<T>(s.depth[i]);
      b.targets.seg[o1 + i] = s.seg[i];
    }
  }
  return b;
}

// Endless shuffled pass over a split: each epoch is a fresh permutation.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> indices, std::uint64_t seed) : idx_(std::move(indices)), rng_(seed, 11) {
    if (idx_.empty()) throw DataError("cannot sample batches from an empty split");
    shuffle();
  }

  std::vector<int> next(int batch) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch));
    while (static_cast<int>(out.size()) < batch) {
      if (pos_ == idx_.size()) shuffle();
      out.push_back(idx_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = idx_.size() - 1; i > 0; --i) std::swap(idx_[i], idx_[rng_.below(static_cast<std::uint32_t>(i + 1))]);
    pos_ = 0;
  }
  std::vector<int> idx_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace auxnas::data
