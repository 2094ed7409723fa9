#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "auxnas/layers.hpp"
#include "auxnas/tensor_io.hpp"

namespace auxnas {

enum class TaskKind { segmentation, depth, normal };

struct TaskSpec {
  int id = 1;  // 1-based position in the full task list; names parameters
  TaskKind kind = TaskKind::segmentation;
  int classes = 5;  // segmentation only

  int channels() const {
    switch (kind) {
      case TaskKind::segmentation: return classes;
      case TaskKind::depth: return 1;
      case TaskKind::normal: return 3;
    }
    return 0;
  }
  std::string tag() const { return "t" + std::to_string(id); }
  bool operator==(const TaskSpec&) const = default;
};

inline std::string kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::segmentation: return "seg";
    case TaskKind::depth: return "depth";
    case TaskKind::normal: return "normal";
  }
  return "?";
}

inline TaskKind parse_kind(const std::string& s) {
  if (s == "seg" || s == "segmentation") return TaskKind::segmentation;
  if (s == "depth") return TaskKind::depth;
  if (s == "normal" || s == "normals") return TaskKind::normal;
  throw ConfigError("unknown task kind: " + s);
}

enum class Variant { baseline, context, ushape };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::context: return "context";
    case Variant::ushape: return "ushape";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "context") return Variant::context;
  if (s == "ushape" || s == "u-shape") return Variant::ushape;
  throw ConfigError("unknown network variant: " + s);
}

inline constexpr int kNumTaps = 4;

struct ModelConfig {
  Variant variant = Variant::baseline;
  std::vector<TaskSpec> tasks;
  int in_channels = 3;
  int height = 32;
  int width = 32;
  int stem_channels = 8;
  std::array<int, kNumTaps> stage_channels = {8, 16, 24, 32};
  int decoder_channels = 32;
  int aspp_branch = 16;
  // When false, inputs need not be divisible by 2^taps (tiny gradient checks).
  bool strict_input_size = true;

  const TaskSpec& task(int id) const {
    for (const auto& t : tasks)
      if (t.id == id) return t;
    throw ConfigError("model has no task t" + std::to_string(id));
  }
  bool has_task(int id) const {
    for (const auto& t : tasks)
      if (t.id == id) return true;
    return false;
  }
};

inline void validate(const ModelConfig& cfg) {
  const int T = static_cast<int>(cfg.tasks.size());
  if (T < 1 || T > 3) throw ConfigError("between 1 and 3 tasks required, got " + std::to_string(T));
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const auto& t = cfg.tasks[i];
    if (t.id < 1 || t.id > 3) throw ConfigError("task id must be in 1..3");
    if (t.kind == TaskKind::segmentation && t.classes < 2) throw ConfigError("segmentation needs >= 2 classes");
    for (std::size_t j = 0; j < i; ++j)
      if (cfg.tasks[j].id == t.id) throw ConfigError("duplicate task id t" + std::to_string(t.id));
  }
  if (cfg.height < 1 || cfg.width < 1) throw ConfigError("input size must be positive");
  const int div = 1 << kNumTaps;
  if (cfg.strict_input_size && (cfg.height % div != 0 || cfg.width % div != 0))
    throw ConfigError("input size must be divisible by " + std::to_string(div));
}

template <class T>
struct MtlModel {
  ModelConfig cfg;
  ParamSet<T> params;

  std::vector<int> tap_channels() const { return {cfg.stage_channels.begin(), cfg.stage_channels.end()}; }
};

template <class T>
struct MainOutput {
  std::vector<Var<T>> preds;  // in cfg.tasks order
  std::vector<Var<T>> taps;   // O_1..O_P
};

namespace net {

inline std::string stage(int p) { return "enc.s" + std::to_string(p); }
inline std::string dec(const TaskSpec& t) { return "dec." + t.tag(); }

inline layers::ConvBnRelu stage_down(int p, int in, int out) { return layers::conv3x3(stage(p) + ".conv1", in, out, 2); }
inline layers::ConvBnRelu stage_body(int p, int c) { return layers::conv3x3(stage(p) + ".conv2", c, c); }

// U-shape fusion steps: (name, in channels, out channels, tap fused).
struct UStep {
  std::string name;
  int in, out, tap;
};
inline std::vector<UStep> ushape_steps(const ModelConfig& cfg, const TaskSpec& t) {
  const auto& c = cfg.stage_channels;
  return {{dec(t) + ".up3", c[3] + c[2], c[2], 2},
          {dec(t) + ".up2", c[2] + c[1], c[1], 1},
          {dec(t) + ".up1", c[1] + c[0], c[1], 0}};
}

}  // namespace net

// Task-specific output activation: softplus keeps depth positive, normals are
// unit length per pixel.
template <class T>
Var<T> finish_prediction(const TaskSpec& t, Var<T> raw) {
  switch (t.kind) {
    case TaskKind::segmentation: return raw;
    case TaskKind::depth: return ops::softplus(raw);
    case TaskKind::normal: return ops::l2_normalize_channels(raw);
  }
  return raw;
}

template <class T>
MtlModel<T> build_model(const ModelConfig& cfg, Rng& rng) {
  validate(cfg);
  MtlModel<T> m{cfg, {}};
  auto& ps = m.params;
  const Tag sh = Tag::shared();
  layers::conv3x3("enc.stem", cfg.in_channels, cfg.stem_channels).init(ps, sh, rng);
  int in = cfg.stem_channels;
  for (int p = 1; p <= kNumTaps; ++p) {
    const int c = cfg.stage_channels[static_cast<std::size_t>(p - 1)];
    net::stage_down(p, in, c).init(ps, sh, rng);
    net::stage_body(p, c).init(ps, sh, rng);
    in = c;
  }
  if (cfg.variant == Variant::context) layers::init_aspp(ps, "aspp", in, cfg.aspp_branch, sh, rng);
  for (const auto& t : cfg.tasks) {
    const Tag tt = Tag::task_of(t.id);
    if (cfg.variant == Variant::ushape) {
      int last = 0;
      for (const auto& s : net::ushape_steps(cfg, t)) {
        layers::conv3x3(s.name, s.in, s.out).init(ps, tt, rng);
        last = s.out;
      }
      layers::init_head(ps, net::dec(t) + ".head", last, t.channels(), tt, rng);
    } else {
      layers::conv3x3(net::dec(t) + ".c1", in, cfg.decoder_channels).init(ps, tt, rng);
      layers::conv3x3(net::dec(t) + ".c2", cfg.decoder_channels, cfg.decoder_channels).init(ps, tt, rng);
      layers::init_head(ps, net::dec(t) + ".head", cfg.decoder_channels, t.channels(), tt, rng);
    }
  }
  return m;
}

// Main path only: encoder taps and per-task predictions at input resolution.
template <class T>
MainOutput<T> forward_main(Ctx<T>& c, const MtlModel<T>& model, Var<T> x) {
  const auto& cfg = model.cfg;
  if (x.dim(1) != cfg.in_channels || x.dim(2) != cfg.height || x.dim(3) != cfg.width)
    throw DimensionError("input " + to_string(x.shape()) + " does not match model input " +
                         std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  MainOutput<T> out;
  auto h = layers::conv3x3("enc.stem", cfg.in_channels, cfg.stem_channels)(c, x);
  int in = cfg.stem_channels;
  for (int p = 1; p <= kNumTaps; ++p) {
    const int ch = cfg.stage_channels[static_cast<std::size_t>(p - 1)];
    h = net::stage_body(p, ch)(c, net::stage_down(p, in, ch)(c, h));
    ops::check_finite(h, net::stage(p));
    out.taps.push_back(h);
    in = ch;
  }
  Var<T> top = h;
  if (cfg.variant == Variant::context) {
    top = layers::aspp(c, "aspp", h, cfg.aspp_branch);
    ops::check_finite(top, "aspp");
  }
  for (const auto& t : cfg.tasks) {
    Var<T> f;
    if (cfg.variant == Variant::ushape) {
      f = top;
      for (const auto& s : net::ushape_steps(cfg, t)) {
        const auto& tap = out.taps[static_cast<std::size_t>(s.tap)];
        auto up = ops::bilinear_resize(f, tap.dim(2), tap.dim(3));
        f = layers::conv3x3(s.name, s.in, s.out)(c, ops::concat<T>({up, tap}));
      }
    } else {
      f = layers::conv3x3(net::dec(t) + ".c1", in, cfg.decoder_channels)(c, top);
      f = layers::conv3x3(net::dec(t) + ".c2", cfg.decoder_channels, cfg.decoder_channels)(c, f);
    }
    auto pred = finish_prediction(t, layers::head(c, net::dec(t) + ".head", f, cfg.height, cfg.width));
    ops::check_finite(pred, net::dec(t));
    out.preds.push_back(pred);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "AXCK" | u32 version=1 | u32 header length | JSON header |
// one TNSR record per parameter in header order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : cfg.tasks) tasks.push_back({{"id", t.id}, {"kind", kind_name(t.kind)}, {"classes", t.classes}});
  return {{"variant", variant_name(cfg.variant)},
          {"tasks", tasks},
          {"input", {cfg.height, cfg.width}},
          {"in_channels", cfg.in_channels},
          {"stem_channels", cfg.stem_channels},
          {"tap_channels", cfg.stage_channels},
          {"decoder_channels", cfg.decoder_channels},
          {"aspp_branch", cfg.aspp_branch}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    for (const auto& t : j.at("tasks"))
      cfg.tasks.push_back({t.at("id").get<int>(), parse_kind(t.at("kind").get<std::string>()), t.at("classes").get<int>()});
    cfg.height = j.at("input").at(0).get<int>();
    cfg.width = j.at("input").at(1).get<int>();
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.stem_channels = j.at("stem_channels").get<int>();
    cfg.stage_channels = j.at("tap_channels").get<std::array<int, kNumTaps>>();
    cfg.decoder_channels = j.at("decoder_channels").get<int>();
    cfg.aspp_branch = j.at("aspp_branch").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  return cfg;
}

inline std::string tag_code(const Tag& t) {
  switch (t.group) {
    case Group::shared: return "shared";
    case Group::task: return "task" + std::to_string(t.task);
    case Group::aux: return "aux" + std::to_string(t.task);
    case Group::controller: return "controller";
  }
  return "?";
}

inline Tag parse_tag_code(const std::string& s) {
  if (s == "shared") return Tag::shared();
  if (s == "controller") return Tag::controller();
  if (s.rfind("task", 0) == 0) return Tag::task_of(std::stoi(s.substr(4)));
  if (s.rfind("aux", 0) == 0) return Tag::aux_of(std::stoi(s.substr(3)));
  throw FormatError("unknown parameter tag " + s);
}

struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, io::AnyTensor> tensors;
  std::map<std::string, std::pair<Tag, bool>> meta;  // tag, trainable
};

template <class T>
std::string encode_checkpoint(const ModelConfig& cfg, const ParamSet<T>& params, const nlohmann::json& extra = {}) {
  nlohmann::json header = config_to_json(cfg);
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, p] : params)
    plist.push_back({{"name", name}, {"tag", tag_code(p.tag)}, {"trainable", p.trainable}});
  header["params"] = plist;
  header["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
  const std::string hs = header.dump();
  std::string out = "AXCK";
  io::detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(hs.size()));
  out += hs;
  for (const auto& [_, p] : params) io::append_tensor(out, p.value);
  return out;
}

template <class T>
void write_checkpoint(const std::filesystem::path& path, const MtlModel<T>& model, const nlohmann::json& extra = {}) {
  io::write_file(path, encode_checkpoint(model.cfg, model.params, extra));
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "AXCK") throw FormatError("bad checkpoint magic");
  std::size_t pos = 4;
  const auto version = io::detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const auto hlen = io::detail::get_le<std::uint32_t>(bytes, pos);
  if (bytes.size() - pos < hlen) throw FormatError("truncated checkpoint header");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  for (const auto& p : ck.header.at("params")) {
    const auto name = p.at("name").get<std::string>();
    ck.tensors.emplace(name, io::decode_tensor(bytes, pos));
    ck.meta.emplace(name, std::pair{parse_tag_code(p.at("tag").get<std::string>()), p.at("trainable").get<bool>()});
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

// Rebuilds a model from a checkpoint; the parameter names must match the
// architecture described by the header exactly.
template <class T>
MtlModel<T> model_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg = config_from_json(ck.header);
  Rng rng(0);
  MtlModel<T> m = build_model<T>(cfg, rng);
  if (m.params.size() != ck.tensors.size())
    throw FormatError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                      std::to_string(m.params.size()));
  for (auto& [name, p] : m.params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw FormatError("checkpoint lacks " + name);
    Tensor<T> v = io::as_floating<T>(it->second);
    if (v.shape != p.value.shape) throw FormatError("shape mismatch for " + name);
    p.value = std::move(v);
  }
  return m;
}

// Copies every checkpoint tensor whose name and shape match a parameter of
// `params` and that `want` accepts. Returns the number copied.
template <class T>
std::size_t load_matching(ParamSet<T>& params, const Checkpoint& ck,
                          const std::function<bool(const std::string&, const Param<T>&)>& want) {
  std::size_t n = 0;
  for (auto& [name, p] : params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end() || !want(name, p)) continue;
    Tensor<T> v = io::as_floating<T>(it->second);
    if (v.shape != p.value.shape) throw FormatError("shape mismatch for " + name);
    p.value = std::move(v);
    ++n;
  }
  return n;
}

}  // namespace auxnas
