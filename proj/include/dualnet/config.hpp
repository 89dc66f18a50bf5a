#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/stream.hpp"
#include "dualnet/trainer.hpp"
#include "json.hpp"

namespace dualnet {

using nlohmann::json;

/// Which task stream a run trains on.
struct StreamConfig {
  /// "split-<source>" (e.g. split-mnist) or "ctrl-<kind>" (ctrl-S-, ctrl-S+,
  /// ctrl-S_in, ctrl-S_out, ctrl-S_pl).
  std::string kind = "split-mnist";
  /// Empty = the stream kind's own default (split: task-free online;
  /// ctrl: task-aware batch).
  std::optional<Protocol> protocol;
  std::optional<StreamMode> mode;
  std::size_t classes_per_task = 2;
  std::size_t tasks = 5;
  std::size_t train_per_class = 0;  ///< 0 = all available
  std::size_t val_per_class = 0;
  std::size_t validation_tasks = 0;
  double label_fraction = 1.0;
  ImageFormat format;
  /// Empty = each run uses its own seed for the stream as well.
  std::optional<std::uint64_t> seed;
  CtrlOptions ctrl;
  std::uint64_t synthetic_seed = 0;
};

struct ExperimentConfig {
  TrainConfig train;
  StreamConfig stream;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "runs/out";
  std::string data_root;  ///< empty = $DUALNET_DATA or ./data
  bool save_checkpoint = false;
};

/// Field-level configuration error, e.g. "train.fast_lr: expected a number".
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

/// Reads the keys of one JSON object, remembering which were consumed so
/// that leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    bool ok = true;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    if (!ok) throw ConfigError(field(key) + ": expected " + type_name<T>() + ", got " + v.dump());
    try {
      out = v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": expected " + type_name<T>() + ", got " + j_.at(key).dump());
    }
  }
  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      seen_.insert(key);
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }
  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    fn(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(field(k) + ": unknown key");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "a non-negative integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

inline json augment_to_json(const AugmentPolicy& a) {
  return {{"crop_padding", a.crop_padding},   {"flip_probability", a.flip_probability},
          {"brightness_lo", a.brightness_lo}, {"brightness_hi", a.brightness_hi},
          {"noise_sigma", a.noise_sigma},     {"clamp_lo", a.clamp_lo},
          {"clamp_hi", a.clamp_hi}};
}

inline AugmentPolicy augment_from_json(const json& j, const std::string& path, AugmentPolicy a) {
  ObjectReader r(j, path);
  r.get("crop_padding", a.crop_padding);
  r.get("flip_probability", a.flip_probability);
  r.get("brightness_lo", a.brightness_lo);
  r.get("brightness_hi", a.brightness_hi);
  r.get("noise_sigma", a.noise_sigma);
  r.get("clamp_lo", a.clamp_lo);
  r.get("clamp_hi", a.clamp_hi);
  r.finish();
  return a;
}

}  // namespace detail

inline json to_json(const ArchConfig& a) {
  return {{"in_channels", a.in_channels},
          {"image_size", a.image_size},
          {"widths", a.widths},
          {"batchnorm", a.batchnorm},
          {"conv_bias", a.conv_bias},
          {"fast_reduction", a.fast_reduction},
          {"projector_hidden", a.projector_hidden},
          {"projector_out", a.projector_out}};
}

inline json to_json(const TrainConfig& c) {
  using detail::opt;
  return {{"method", to_string(c.method)},
          {"ssl_iters", c.ssl_iters},
          {"inner_updates", opt(c.inner_updates)},
          {"lookahead", {{"k", c.lookahead.k}, {"epsilon", c.lookahead.epsilon}, {"beta", c.lookahead.beta}}},
          {"fast_lr", opt(c.fast_lr)},
          {"slow_supervised_lr", opt(c.slow_supervised_lr)},
          {"lambda_bt", c.lambda_bt},
          {"lambda_tr", c.lambda_tr},
          {"tau", opt(c.tau)},
          {"dropout_p", opt(c.dropout_p)},
          {"der_alpha", c.der_alpha},
          {"batch_size", c.batch_size},
          {"replay_batch", c.replay_batch},
          {"ssl_batch", c.ssl_batch},
          {"memory_size", opt(c.memory_size)},
          {"epochs", c.epochs},
          {"ssl_use_unlabeled", c.ssl_use_unlabeled},
          {"ssl_freeze_bn_stats", c.ssl_freeze_bn_stats},
          {"refresh_after_update", c.refresh_after_update},
          {"ssl_augment", detail::augment_to_json(c.ssl_augment)},
          {"sup_augment", detail::augment_to_json(c.sup_augment)},
          {"eval_batch", c.eval_batch},
          {"arch", to_json(c.arch)},
          {"seed", c.seed}};
}

inline std::string to_string(Protocol p) { return p == Protocol::task_aware ? "task-aware" : "task-free"; }
inline std::string to_string(StreamMode m) { return m == StreamMode::online ? "online" : "batch"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "task-aware") return Protocol::task_aware;
  if (s == "task-free") return Protocol::task_free;
  throw std::invalid_argument("protocol must be task-aware or task-free, got '" + s + "'");
}
inline StreamMode parse_mode(const std::string& s) {
  if (s == "online") return StreamMode::online;
  if (s == "batch") return StreamMode::batch;
  throw std::invalid_argument("mode must be online or batch, got '" + s + "'");
}

inline json to_json(const StreamConfig& s) {
  return {{"kind", s.kind},
          {"protocol", s.protocol ? json(to_string(*s.protocol)) : json(nullptr)},
          {"mode", s.mode ? json(to_string(*s.mode)) : json(nullptr)},
          {"classes_per_task", s.classes_per_task},
          {"tasks", s.tasks},
          {"train_per_class", s.train_per_class},
          {"val_per_class", s.val_per_class},
          {"validation_tasks", s.validation_tasks},
          {"label_fraction", s.label_fraction},
          {"format", {{"channels", s.format.channels}, {"size", s.format.size}}},
          {"seed", detail::opt(s.seed)},
          {"synthetic_seed", s.synthetic_seed},
          {"ctrl",
           {{"classes_per_task", s.ctrl.classes_per_task},
            {"large_train", s.ctrl.large_train},
            {"large_val", s.ctrl.large_val},
            {"small_train", s.ctrl.small_train},
            {"small_val", s.ctrl.small_val},
            {"tiny_train", s.ctrl.tiny_train},
            {"tiny_val", s.ctrl.tiny_val},
            {"shift_channel", s.ctrl.shift.channel},
            {"shift_offset", s.ctrl.shift.offset},
            {"sources", s.ctrl.sources},
            {"pl_tasks", s.ctrl.pl_tasks}}}};
}

inline json to_json(const ExperimentConfig& e) {
  return {{"train", to_json(e.train)},         {"stream", to_json(e.stream)},
          {"seeds", e.seeds},                  {"output_dir", e.output_dir},
          {"data_root", e.data_root},          {"save_checkpoint", e.save_checkpoint}};
}

inline void from_json_into(const json& j, const std::string& path, ArchConfig& a) {
  detail::ObjectReader r(j, path);
  r.get("in_channels", a.in_channels);
  r.get("image_size", a.image_size);
  r.get("widths", a.widths);
  r.get("batchnorm", a.batchnorm);
  r.get("conv_bias", a.conv_bias);
  r.get("fast_reduction", a.fast_reduction);
  r.get("projector_hidden", a.projector_hidden);
  r.get("projector_out", a.projector_out);
  r.finish();
}

inline void from_json_into(const json& j, const std::string& path, TrainConfig& c) {
  detail::ObjectReader r(j, path);
  std::string method = to_string(c.method);
  r.get("method", method);
  try {
    c.method = parse_method(method);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.field("method") + ": " + e.what());
  }
  r.get("ssl_iters", c.ssl_iters);
  r.get("inner_updates", c.inner_updates);
  r.with("lookahead", [&](const json& v, const std::string& p) {
    detail::ObjectReader l(v, p);
    l.get("k", c.lookahead.k);
    l.get("epsilon", c.lookahead.epsilon);
    l.get("beta", c.lookahead.beta);
    l.finish();
  });
  r.get("fast_lr", c.fast_lr);
  r.get("slow_supervised_lr", c.slow_supervised_lr);
  r.get("lambda_bt", c.lambda_bt);
  r.get("lambda_tr", c.lambda_tr);
  r.get("tau", c.tau);
  r.get("dropout_p", c.dropout_p);
  r.get("der_alpha", c.der_alpha);
  r.get("batch_size", c.batch_size);
  r.get("replay_batch", c.replay_batch);
  r.get("ssl_batch", c.ssl_batch);
  r.get("memory_size", c.memory_size);
  r.get("epochs", c.epochs);
  r.get("ssl_use_unlabeled", c.ssl_use_unlabeled);
  r.get("ssl_freeze_bn_stats", c.ssl_freeze_bn_stats);
  r.get("refresh_after_update", c.refresh_after_update);
  r.with("ssl_augment", [&](const json& v, const std::string& p) {
    c.ssl_augment = detail::augment_from_json(v, p, c.ssl_augment);
  });
  r.with("sup_augment", [&](const json& v, const std::string& p) {
    c.sup_augment = detail::augment_from_json(v, p, c.sup_augment);
  });
  r.get("eval_batch", c.eval_batch);
  r.with("arch", [&](const json& v, const std::string& p) { from_json_into(v, p, c.arch); });
  r.get("seed", c.seed);
  r.finish();
}

inline void from_json_into(const json& j, const std::string& path, StreamConfig& s) {
  detail::ObjectReader r(j, path);
  r.get("kind", s.kind);
  std::optional<std::string> protocol, mode;
  if (s.protocol) protocol = to_string(*s.protocol);
  if (s.mode) mode = to_string(*s.mode);
  r.get("protocol", protocol);
  r.get("mode", mode);
  try {
    s.protocol = protocol ? std::optional(parse_protocol(*protocol)) : std::nullopt;
    s.mode = mode ? std::optional(parse_mode(*mode)) : std::nullopt;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.field(protocol && !mode ? "protocol" : "mode") + ": " + e.what());
  }
  r.get("classes_per_task", s.classes_per_task);
  r.get("tasks", s.tasks);
  r.get("train_per_class", s.train_per_class);
  r.get("val_per_class", s.val_per_class);
  r.get("validation_tasks", s.validation_tasks);
  r.get("label_fraction", s.label_fraction);
  r.with("format", [&](const json& v, const std::string& p) {
    detail::ObjectReader f(v, p);
    f.get("channels", s.format.channels);
    f.get("size", s.format.size);
    f.finish();
  });
  r.get("seed", s.seed);
  r.get("synthetic_seed", s.synthetic_seed);
  r.with("ctrl", [&](const json& v, const std::string& p) {
    detail::ObjectReader c(v, p);
    c.get("classes_per_task", s.ctrl.classes_per_task);
    c.get("large_train", s.ctrl.large_train);
    c.get("large_val", s.ctrl.large_val);
    c.get("small_train", s.ctrl.small_train);
    c.get("small_val", s.ctrl.small_val);
    c.get("tiny_train", s.ctrl.tiny_train);
    c.get("tiny_val", s.ctrl.tiny_val);
    c.get("shift_channel", s.ctrl.shift.channel);
    c.get("shift_offset", s.ctrl.shift.offset);
    c.get("sources", s.ctrl.sources);
    c.get("pl_tasks", s.ctrl.pl_tasks);
    c.finish();
  });
  r.finish();
}

/// Validates field ranges that the trainer would otherwise reject later.
inline void validate(const ExperimentConfig& e) {
  try {
    e.train.validate();
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("train: ") + err.what());
  }
  if (e.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (!(e.stream.label_fraction > 0 && e.stream.label_fraction <= 1))
    throw ConfigError("stream.label_fraction: must lie in (0, 1]");
  if (e.stream.format.channels == 0 || e.stream.format.size == 0)
    throw ConfigError("stream.format: channels and size must be positive");
  const bool split = e.stream.kind.rfind("split-", 0) == 0;
  const bool ctrl = e.stream.kind.rfind("ctrl-", 0) == 0;
  if (!split && !ctrl) throw ConfigError("stream.kind: expected split-<source> or ctrl-<kind>, got '" + e.stream.kind + "'");
  if (ctrl) {
    try {
      parse_ctrl_kind(e.stream.kind.substr(5));
    } catch (const std::invalid_argument& err) {
      throw ConfigError(std::string("stream.kind: ") + err.what());
    }
  }
}

inline ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig e;
  detail::ObjectReader r(j, "");
  r.with("train", [&](const json& v, const std::string& p) { from_json_into(v, p, e.train); });
  r.with("stream", [&](const json& v, const std::string& p) { from_json_into(v, p, e.stream); });
  r.get("seeds", e.seeds);
  r.get("output_dir", e.output_dir);
  r.get("data_root", e.data_root);
  r.get("save_checkpoint", e.save_checkpoint);
  r.finish();
  validate(e);
  return e;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

/// Builds the stream a run with `seed` trains on.
inline TaskStream build_stream(const StreamConfig& s, SourceRegistry& registry, std::uint64_t seed) {
  const std::uint64_t stream_seed = s.seed.value_or(seed);
  TaskStream stream;
  if (s.kind.rfind("split-", 0) == 0) {
    SplitOptions opt;
    opt.train_per_class = s.train_per_class;
    opt.val_per_class = s.val_per_class;
    opt.validation_tasks = s.validation_tasks;
    opt.format = s.format;
    stream = split_stream(registry.get(s.kind.substr(6)), s.classes_per_task, s.tasks, stream_seed, opt);
  } else {
    CtrlOptions opt = s.ctrl;
    opt.format = s.format;
    stream = ctrl_stream(parse_ctrl_kind(s.kind.substr(5)), registry, stream_seed, opt);
  }
  if (s.protocol) stream.protocol = *s.protocol;
  if (s.mode) stream.mode = *s.mode;
  if (s.label_fraction < 1.0) stream = mask_labels(std::move(stream), s.label_fraction, derive_seed(stream_seed, "labels"));
  return stream;
}

}  // namespace dualnet
