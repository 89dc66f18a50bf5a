#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/datasets.hpp"
#include "dualnet/rng.hpp"
#include "dualnet/tensor.hpp"
#include "json.hpp"

namespace dualnet {

/// Target layout every source is converted to.
struct ImageFormat {
  std::size_t channels = 3;
  std::size_t size = 32;
  friend bool operator==(const ImageFormat&, const ImageFormat&) = default;
};

struct ChannelShift {
  std::size_t channel = 0;
  Scalar offset = Scalar(0.5);
};

struct TaskSpec {
  std::string dataset;
  std::vector<int> classes;  ///< source class indices (0-based)
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  double label_fraction = 1.0;
  /// permutation[k] is the class whose label classes[k] is reported as.
  std::optional<std::vector<int>> permutation;
  std::optional<ChannelShift> shift;
  std::uint64_t seed = 0;
  std::string role;  ///< e.g. "T1+", "T2", "T1''"
};

/// Materialised samples of one task. Labels live in the stream-wide label
/// space (source label_base + class).
struct TaskData {
  Tensor train_x;
  std::vector<int> train_y;
  std::vector<bool> labeled;
  Tensor val_x;
  std::vector<int> val_y;

  std::size_t train_size() const { return train_y.size(); }
  std::vector<int> label_set() const {
    std::vector<int> out = val_y;
    out.insert(out.end(), train_y.begin(), train_y.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

enum class Protocol { task_aware, task_free };
enum class StreamMode { online, batch };

struct TaskStream {
  std::string kind;
  Protocol protocol = Protocol::task_free;
  StreamMode mode = StreamMode::online;
  ImageFormat format;
  std::uint64_t seed = 0;
  std::vector<TaskSpec> specs;
  std::vector<TaskData> tasks;
  /// Held-out tasks for hyper-parameter selection; never trained in a run.
  std::vector<TaskSpec> validation_specs;
  std::vector<TaskData> validation_tasks;

  std::size_t size() const { return tasks.size(); }
};

namespace detail {

/// Bilinear resample of one channel plane (align-corners = false).
inline void resample(const float* src, std::size_t sh, std::size_t sw, Scalar* dst, std::size_t dh, std::size_t dw) {
  const double sy = static_cast<double>(sh) / dh, sx = static_cast<double>(sw) / dw;
  for (std::size_t y = 0; y < dh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(sh - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(sw - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
      dst[y * dw + x] = static_cast<Scalar>(v);
    }
  }
}

}  // namespace detail

/// Converts selected images to the target format: resized, grayscale
/// replicated to every channel (or colour averaged down to one), optional
/// additive channel shift.
inline Tensor to_tensor(const ImageSet& set, std::span<const std::size_t> indices, const ImageFormat& fmt,
                        const std::optional<ChannelShift>& shift = std::nullopt) {
  if (indices.empty()) return {};
  Tensor out({indices.size(), fmt.channels, fmt.size, fmt.size});
  const std::size_t plane = fmt.size * fmt.size;
  std::vector<Scalar> tmp(plane);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* img = set.image(indices[i]);
    Scalar* dst = out.data() + i * out.stride0();
    const std::size_t src_plane = set.height * set.width;
    if (set.channels == fmt.channels) {
      for (std::size_t c = 0; c < fmt.channels; ++c)
        detail::resample(img + c * src_plane, set.height, set.width, dst + c * plane, fmt.size, fmt.size);
    } else if (set.channels == 1) {
      detail::resample(img, set.height, set.width, dst, fmt.size, fmt.size);
      for (std::size_t c = 1; c < fmt.channels; ++c) std::copy_n(dst, plane, dst + c * plane);
    } else if (fmt.channels == 1) {
      std::fill_n(dst, plane, Scalar(0));
      for (std::size_t c = 0; c < set.channels; ++c) {
        detail::resample(img + c * src_plane, set.height, set.width, tmp.data(), fmt.size, fmt.size);
        for (std::size_t p = 0; p < plane; ++p) dst[p] += tmp[p] / static_cast<Scalar>(set.channels);
      }
    } else {
      throw std::invalid_argument("cannot convert " + std::to_string(set.channels) + "-channel images to " +
                                  std::to_string(fmt.channels) + " channels");
    }
    if (shift) {
      if (shift->channel >= fmt.channels) throw std::invalid_argument("shift channel out of range");
      for (std::size_t p = 0; p < plane; ++p) dst[shift->channel * plane + p] += shift->offset;
    }
  }
  return out;
}

namespace detail {

/// Picks up to `per_class` indices of each class from `set`, in a seeded
/// order, and interleaves them by a final seeded shuffle.
inline std::vector<std::size_t> pick(const ImageSet& set, const std::vector<int>& classes, std::size_t total,
                                     Rng& rng, const std::string& what) {
  if (total == 0) return {};
  std::vector<std::vector<std::size_t>> by_class(classes.size());
  for (std::size_t i = 0; i < set.count(); ++i) {
    auto it = std::find(classes.begin(), classes.end(), set.labels[i]);
    if (it != classes.end()) by_class[static_cast<std::size_t>(it - classes.begin())].push_back(i);
  }
  std::vector<std::size_t> out;
  const std::size_t k = classes.size();
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t want = total / k + (c < total % k ? 1 : 0);
    if (by_class[c].size() < want) {
      throw std::invalid_argument(what + ": class " + std::to_string(classes[c]) + " has " +
                                  std::to_string(by_class[c].size()) + " samples, " + std::to_string(want) + " requested");
    }
    rng.shuffle(std::span(by_class[c]));
    out.insert(out.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(want));
  }
  rng.shuffle(std::span(out));
  return out;
}

inline std::size_t count_of(const ImageSet& set, const std::vector<int>& classes) {
  return static_cast<std::size_t>(std::count_if(set.labels.begin(), set.labels.end(), [&](int l) {
    return std::find(classes.begin(), classes.end(), l) != classes.end();
  }));
}

}  // namespace detail

/// Builds the samples described by `spec` from its source.
inline TaskData materialize(const TaskSpec& spec, const Source& src, const ImageFormat& fmt) {
  Rng rng(spec.seed);
  Rng train_rng = rng.child("train"), val_rng = rng.child("val");
  const auto train_idx = detail::pick(src.train, spec.classes, spec.n_train, train_rng, spec.dataset + " train");
  const auto val_idx = detail::pick(src.test, spec.classes, spec.n_val, val_rng, spec.dataset + " val");
  auto label = [&](int cls) {
    int reported = cls;
    if (spec.permutation) {
      auto it = std::find(spec.classes.begin(), spec.classes.end(), cls);
      reported = (*spec.permutation)[static_cast<std::size_t>(it - spec.classes.begin())];
    }
    return src.label_base + reported;
  };
  TaskData t;
  t.train_x = to_tensor(src.train, train_idx, fmt, spec.shift);
  t.val_x = to_tensor(src.test, val_idx, fmt, spec.shift);
  for (auto i : train_idx) t.train_y.push_back(label(src.train.labels[i]));
  for (auto i : val_idx) t.val_y.push_back(label(src.test.labels[i]));
  t.labeled.assign(t.train_y.size(), true);
  return t;
}

struct SplitOptions {
  /// 0 = every available sample of the task's classes.
  std::size_t train_per_class = 0;
  std::size_t val_per_class = 0;
  /// Extra disjoint tasks reserved for hyper-parameter selection.
  std::size_t validation_tasks = 0;
  ImageFormat format;
};

/// Class-incremental split: disjoint class subsets drawn without
/// replacement in a seeded order.
inline TaskStream split_stream(const Source& src, std::size_t classes_per_task, std::size_t n_tasks,
                               std::uint64_t seed, const SplitOptions& opt = {}) {
  const std::size_t needed = classes_per_task * (n_tasks + opt.validation_tasks);
  if (classes_per_task == 0 || n_tasks == 0) throw std::invalid_argument("split_stream: empty split requested");
  if (needed > static_cast<std::size_t>(src.num_classes)) {
    throw std::invalid_argument("split_stream: " + std::to_string(needed) + " classes requested but " + src.name +
                                " has " + std::to_string(src.num_classes));
  }
  Rng rng(derive_seed(seed, "split"));
  std::vector<int> order(static_cast<std::size_t>(src.num_classes));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span(order));

  TaskStream stream;
  stream.kind = "split-" + src.name;
  stream.seed = seed;
  stream.format = opt.format;
  for (std::size_t t = 0; t < n_tasks + opt.validation_tasks; ++t) {
    TaskSpec spec;
    spec.dataset = src.name;
    spec.classes.assign(order.begin() + static_cast<std::ptrdiff_t>(t * classes_per_task),
                        order.begin() + static_cast<std::ptrdiff_t>((t + 1) * classes_per_task));
    spec.n_train = opt.train_per_class ? opt.train_per_class * classes_per_task : detail::count_of(src.train, spec.classes);
    spec.n_val = opt.val_per_class ? opt.val_per_class * classes_per_task : detail::count_of(src.test, spec.classes);
    spec.seed = derive_seed(seed, "task", t);
    const bool held_out = t >= n_tasks;
    spec.role = held_out ? "V" + std::to_string(t - n_tasks + 1) : "T" + std::to_string(t + 1);
    TaskData data = materialize(spec, src, opt.format);
    if (held_out) {
      stream.validation_specs.push_back(std::move(spec));
      stream.validation_tasks.push_back(std::move(data));
    } else {
      stream.specs.push_back(std::move(spec));
      stream.tasks.push_back(std::move(data));
    }
  }
  return stream;
}

/// Keeps labels on exactly round(rho * n) uniformly chosen training samples
/// per task; the rest are marked unlabeled.
inline TaskStream mask_labels(TaskStream stream, double rho, std::uint64_t seed) {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("label fraction must lie in (0, 1]");
  if (rho == 1.0) return stream;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    auto& task = stream.tasks[t];
    const std::size_t n = task.train_size();
    const auto keep = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "mask", t));
    rng.shuffle(std::span(idx));
    task.labeled.assign(n, false);
    for (std::size_t i = 0; i < keep; ++i) task.labeled[idx[i]] = true;
    stream.specs[t].label_fraction = rho;
  }
  return stream;
}

// ---- CTrL-style streams -------------------------------------------------

enum class CtrlKind { minus, plus, in, out, pl };

inline CtrlKind parse_ctrl_kind(const std::string& s) {
  if (s == "S-" || s == "s_minus" || s == "minus") return CtrlKind::minus;
  if (s == "S+" || s == "s_plus" || s == "plus") return CtrlKind::plus;
  if (s == "S_in" || s == "s_in" || s == "in") return CtrlKind::in;
  if (s == "S_out" || s == "s_out" || s == "out") return CtrlKind::out;
  if (s == "S_pl" || s == "s_pl" || s == "pl") return CtrlKind::pl;
  throw std::invalid_argument("unknown CTrL stream kind '" + s + "' (expected S-, S+, S_in, S_out, S_pl)");
}

inline std::string to_string(CtrlKind k) {
  switch (k) {
    case CtrlKind::minus: return "S-";
    case CtrlKind::plus: return "S+";
    case CtrlKind::in: return "S_in";
    case CtrlKind::out: return "S_out";
    case CtrlKind::pl: return "S_pl";
  }
  return "?";
}

struct CtrlOptions {
  std::size_t classes_per_task = 5;
  std::size_t large_train = 2000, large_val = 1000;
  std::size_t small_train = 200, small_val = 100;
  std::size_t tiny_train = 50, tiny_val = 30;
  ChannelShift shift{0, Scalar(0.5)};
  /// Sources in task order; empty = defaults. First entry is T1's source.
  std::vector<std::string> sources;
  /// S_pl only: number of unrelated tasks (default 5).
  std::size_t pl_tasks = 5;
  ImageFormat format;
};

/// Seeded permutation of 0..n-1 with no fixed point (n >= 2).
inline std::vector<int> derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("derangement needs at least two elements");
  std::vector<int> p(n);
  for (;;) {
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(std::span(p));
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || p[i] == static_cast<int>(i);
    if (!fixed) return p;
  }
}

inline std::vector<std::string> default_ctrl_sources(CtrlKind kind, SourceRegistry& registry) {
  const std::string fashion = registry.available("fashion_mnist") ? "fashion_mnist" : "blobs";
  if (kind == CtrlKind::pl) return {"mnist", "textures", fashion, "shapes", "color_mnist"};
  if (kind == CtrlKind::in) return {"color_mnist", "textures", "shapes", fashion, "blobs"};
  return {"textures", "mnist", "shapes", fashion, "color_mnist"};
}

/// Desk-scale transfer streams: S-, S+, S_in, S_out (T1..T5 plus a final
/// variant of T1) and S_pl (mutually unrelated tasks).
inline TaskStream ctrl_stream(CtrlKind kind, SourceRegistry& registry, std::uint64_t seed, CtrlOptions opt = {}) {
  auto sources = opt.sources.empty() ? default_ctrl_sources(kind, registry) : opt.sources;
  const std::size_t base_tasks = kind == CtrlKind::pl ? opt.pl_tasks : 5;
  if (sources.size() < base_tasks) throw std::invalid_argument("ctrl_stream: need one source per task");
  Rng rng(derive_seed(seed, "ctrl"));

  TaskStream stream;
  stream.kind = to_string(kind);
  stream.protocol = Protocol::task_aware;
  stream.mode = StreamMode::batch;
  stream.seed = seed;
  stream.format = opt.format;

  auto make = [&](std::size_t t, const std::string& dataset, std::vector<int> classes, std::size_t n_train,
                  std::size_t n_val, std::string role) {
    TaskSpec spec;
    spec.dataset = dataset;
    spec.classes = std::move(classes);
    spec.n_train = n_train;
    spec.n_val = n_val;
    spec.seed = derive_seed(seed, "ctrl.task", t);
    spec.role = std::move(role);
    return spec;
  };
  auto draw_classes = [&](const std::string& dataset) {
    const Source& src = registry.get(dataset);
    std::vector<int> order(static_cast<std::size_t>(src.num_classes));
    std::iota(order.begin(), order.end(), 0);
    Rng local = rng.child(dataset);
    local.shuffle(std::span(order));
    order.resize(opt.classes_per_task);
    return order;
  };

  std::vector<TaskSpec> specs;
  const auto t1_classes = draw_classes(sources[0]);
  if (kind == CtrlKind::pl) {
    for (std::size_t t = 0; t < base_tasks; ++t) {
      const bool last = t + 1 == base_tasks && base_tasks == 5;
      specs.push_back(make(t, sources[t], t == 0 ? t1_classes : draw_classes(sources[t]),
                           last ? opt.large_train : opt.small_train, last ? opt.large_val : opt.small_val,
                           "T" + std::to_string(t + 1)));
    }
  } else {
    std::size_t first_train = opt.small_train, first_val = opt.small_val;
    if (kind == CtrlKind::minus || kind == CtrlKind::in || kind == CtrlKind::out) {
      first_train = opt.large_train;
      first_val = opt.large_val;
    }
    specs.push_back(make(0, sources[0], t1_classes, first_train, first_val, kind == CtrlKind::plus ? "T1-" : kind == CtrlKind::minus ? "T1+" : "T1"));
    for (std::size_t t = 1; t < 5; ++t) {
      specs.push_back(make(t, sources[t], draw_classes(sources[t]), opt.small_train, opt.small_val,
                           "T" + std::to_string(t + 1)));
    }
    TaskSpec last = make(5, sources[0], t1_classes, opt.small_train, opt.small_val, "");
    switch (kind) {
      case CtrlKind::minus:
        last.role = "T1-";
        break;
      case CtrlKind::plus:
        last.n_train = opt.large_train;
        last.n_val = opt.large_val;
        last.role = "T1+";
        break;
      case CtrlKind::in:
        last.n_train = opt.tiny_train;
        last.n_val = opt.tiny_val;
        last.shift = opt.shift;
        last.role = "T1'";
        break;
      case CtrlKind::out: {
        Rng perm_rng = rng.child("permutation");
        const auto d = derangement(t1_classes.size(), perm_rng);
        std::vector<int> perm(t1_classes.size());
        for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = t1_classes[static_cast<std::size_t>(d[k])];
        last.permutation = perm;
        last.role = "T1''";
        break;
      }
      case CtrlKind::pl:
        break;
    }
    specs.push_back(std::move(last));
  }

  for (auto& spec : specs) {
    stream.tasks.push_back(materialize(spec, registry.get(spec.dataset), opt.format));
    stream.specs.push_back(std::move(spec));
  }
  return stream;
}

// ---- manifest -----------------------------------------------------------

/// FNV-1a over the raw bytes of a task's tensors and labels.
inline std::uint64_t digest(const TaskData& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(t.train_x.data(), t.train_x.size() * sizeof(Scalar));
  feed(t.train_y.data(), t.train_y.size() * sizeof(int));
  for (bool l : t.labeled) feed(&l, 1);
  feed(t.val_x.data(), t.val_x.size() * sizeof(Scalar));
  feed(t.val_y.data(), t.val_y.size() * sizeof(int));
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline nlohmann::json manifest(const TaskStream& stream) {
  using nlohmann::json;
  auto spec_json = [](const TaskSpec& s, const TaskData& d) {
    json j{{"role", s.role},
           {"dataset", s.dataset},
           {"classes", s.classes},
           {"labels", d.label_set()},
           {"n_train", d.train_size()},
           {"n_val", d.val_y.size()},
           {"n_labeled", std::count(d.labeled.begin(), d.labeled.end(), true)},
           {"label_fraction", s.label_fraction},
           {"seed", s.seed},
           {"digest", hex64(digest(d))}};
    if (s.permutation) j["permutation"] = *s.permutation;
    if (s.shift) j["shift"] = {{"channel", s.shift->channel}, {"offset", s.shift->offset}};
    return j;
  };
  json tasks = json::array();
  for (std::size_t i = 0; i < stream.tasks.size(); ++i) tasks.push_back(spec_json(stream.specs[i], stream.tasks[i]));
  json held = json::array();
  for (std::size_t i = 0; i < stream.validation_tasks.size(); ++i)
    held.push_back(spec_json(stream.validation_specs[i], stream.validation_tasks[i]));
  return json{{"kind", stream.kind},
              {"protocol", stream.protocol == Protocol::task_aware ? "task-aware" : "task-free"},
              {"mode", stream.mode == StreamMode::online ? "online" : "batch"},
              {"format", {{"channels", stream.format.channels}, {"size", stream.format.size}}},
              {"seed", stream.seed},
              {"tasks", tasks},
              {"validation_tasks", held}};
}

}  // namespace dualnet
