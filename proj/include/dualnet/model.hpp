#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/layers.hpp"
#include "dualnet/rng.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

/// Backbone / fast-net / projector sizes. Defaults are the full desk
/// architecture (3 blocks, 32/64/128 channels, 32x32 RGB input).
struct ArchConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::vector<std::size_t> widths = {32, 64, 128};
  bool batchnorm = true;
  bool conv_bias = false;
  /// Fast layer l has max(2, widths[l] / fast_reduction) hidden channels.
  std::size_t fast_reduction = 8;
  std::size_t projector_hidden = 256;
  std::size_t projector_out = 128;

  std::size_t blocks() const { return widths.size(); }
  Shape input_shape(std::size_t n) const { return {n, in_channels, image_size, image_size}; }
  std::size_t fast_hidden(std::size_t l) const { return std::max<std::size_t>(2, widths[l] / fast_reduction); }

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("architecture needs at least one block");
    if (in_channels == 0 || image_size == 0) throw std::invalid_argument("input extents must be positive");
    if (image_size >> widths.size() == 0) throw std::invalid_argument("image too small for the number of blocks");
    if (fast_reduction == 0) throw std::invalid_argument("fast_reduction must be positive");
  }
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Per-channel keep mask repeated over every spatial position. Train mode:
/// keep with probability 1 - p, kept channels scaled by 1 / (1 - p).
/// Eval mode, or p == 0: all ones, and no random numbers are consumed.
inline Tensor spatial_dropout_mask(double p, std::size_t channels, std::size_t width, std::size_t height, Rng& rng,
                                   Mode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout ratio must lie in [0, 1)");
  Tensor mask({channels, height, width}, Scalar(1));
  if (mode == Mode::eval || p == 0.0) return mask;
  const auto scale = static_cast<Scalar>(1.0 / (1.0 - p));
  const std::size_t plane = width * height;
  for (std::size_t c = 0; c < channels; ++c) {
    const Scalar keep = rng.bernoulli(1.0 - p) ? scale : Scalar(0);
    std::fill_n(mask.data() + c * plane, plane, keep);
  }
  return mask;
}

struct DropoutSpec {
  double p = 0.0;
  Mode mode = Mode::train;
};

/// Maps dataset labels to classifier outputs. Task-aware: one list per task;
/// task-free: one shared list grown in order of first appearance.
class ClassRegistry {
 public:
  explicit ClassRegistry(bool task_aware = false) : task_aware_(task_aware) {}

  bool task_aware() const { return task_aware_; }
  std::size_t head_count() const { return task_aware_ ? tasks_.size() : (shared_.empty() ? 0 : 1); }
  std::size_t head_for(std::optional<std::size_t> task) const {
    if (!task_aware_) return 0;
    if (!task || *task >= tasks_.size()) {
      throw std::out_of_range("unknown task id " + (task ? std::to_string(*task) : std::string("<none>")));
    }
    return *task;
  }
  const std::vector<int>& classes(std::size_t head) const { return task_aware_ ? tasks_.at(head) : shared_; }

  std::size_t index_of(int label, std::optional<std::size_t> task) const {
    const auto& list = classes(head_for(task));
    auto it = std::find(list.begin(), list.end(), label);
    if (it == list.end()) throw std::out_of_range("label " + std::to_string(label) + " not registered");
    return static_cast<std::size_t>(it - list.begin());
  }

  /// Task-aware: defines task `task`'s class list. Returns its head index.
  std::size_t add_task(std::size_t task, std::vector<int> labels) {
    if (!task_aware_) throw std::logic_error("add_task on a task-free registry");
    if (task != tasks_.size()) throw std::invalid_argument("tasks must be registered in order");
    tasks_.push_back(std::move(labels));
    return task;
  }
  /// Task-free: registers unseen labels; returns how many were new.
  std::size_t observe(std::span<const int> labels) {
    if (task_aware_) throw std::logic_error("observe on a task-aware registry");
    std::size_t added = 0;
    for (int l : labels) {
      if (std::find(shared_.begin(), shared_.end(), l) == shared_.end()) {
        shared_.push_back(l);
        ++added;
      }
    }
    return added;
  }

  const std::vector<std::vector<int>>& task_lists() const { return tasks_; }
  const std::vector<int>& shared() const { return shared_; }
  void restore(bool task_aware, std::vector<std::vector<int>> tasks, std::vector<int> shared) {
    task_aware_ = task_aware;
    tasks_ = std::move(tasks);
    shared_ = std::move(shared);
  }

 private:
  bool task_aware_;
  std::vector<std::vector<int>> tasks_;
  std::vector<int> shared_;
};

/// Logits for the rows of a batch that share one head.
struct HeadGroup {
  std::size_t head = 0;
  std::vector<std::size_t> rows;
  Tensor logits;
};

/// Slow backbone (phi) with its SSL projector, optional fast gating network
/// (theta), and classifier heads. With `use_fast == false` it is the plain
/// backbone + head used by the replay baselines.
class DualNetModel {
 public:
  DualNetModel(ArchConfig arch, bool use_fast, bool task_aware, std::uint64_t seed)
      : arch_(std::move(arch)), use_fast_(use_fast), registry_(task_aware), projector_("projector"), seed_(seed) {
    arch_.validate();
    Rng rng(derive_seed(seed, "model.init"));
    std::size_t in = arch_.in_channels;
    for (std::size_t l = 0; l < arch_.blocks(); ++l) {
      Sequential block("slow." + std::to_string(l));
      block.add(LayerSpec::conv2d(in, arch_.widths[l], 3, arch_.conv_bias), rng);
      if (arch_.batchnorm) block.add(LayerSpec::batchnorm2d(arch_.widths[l]), rng);
      block.add(LayerSpec::of(LayerKind::relu), rng);
      block.add(LayerSpec::maxpool2d(2), rng);
      slow_.push_back(std::move(block));
      in = arch_.widths[l];
    }
    const std::size_t feat = arch_.widths.back();
    projector_.add(LayerSpec::of(LayerKind::global_avg_pool), rng)
        .add(LayerSpec::dense(feat, arch_.projector_hidden), rng)
        .add(LayerSpec::of(LayerKind::relu), rng)
        .add(LayerSpec::dense(arch_.projector_hidden, arch_.projector_out), rng);
    if (use_fast_) {
      std::size_t prev = arch_.in_channels;
      for (std::size_t l = 0; l < arch_.blocks(); ++l) {
        Sequential g("fast." + std::to_string(l));
        g.add(LayerSpec::conv2d(prev, arch_.fast_hidden(l), 3), rng)
            .add(LayerSpec::of(LayerKind::relu), rng)
            .add(LayerSpec::maxpool2d(2), rng)
            .add(LayerSpec::conv2d(arch_.fast_hidden(l), arch_.widths[l], 1), rng)
            .add(LayerSpec::of(LayerKind::gate), rng);
        fast_.push_back(std::move(g));
        prev = arch_.widths[l];
      }
      const double ratio = static_cast<double>(count(fast_parameters())) / static_cast<double>(count(slow_parameters()));
      if (ratio > 0.25) {
        throw std::invalid_argument("fast network has " + std::to_string(ratio * 100) +
                                    "% of the backbone's parameters; at most 25% allowed");
      }
    }
    gap_ = std::make_unique<GlobalAvgPool>(LayerSpec::of(LayerKind::global_avg_pool));
  }

  DualNetModel(const DualNetModel& o)
      : arch_(o.arch_),
        use_fast_(o.use_fast_),
        registry_(o.registry_),
        slow_(o.slow_),
        projector_(o.projector_),
        fast_(o.fast_),
        gap_(std::make_unique<GlobalAvgPool>(o.gap_->spec())),
        seed_(o.seed_),
        heads_grown_(o.heads_grown_) {
    for (const auto& h : o.heads_) heads_.push_back(std::make_unique<Dense>(*h));
  }
  DualNetModel& operator=(const DualNetModel& o) {
    if (this != &o) *this = DualNetModel(o);
    return *this;
  }
  DualNetModel(DualNetModel&&) noexcept = default;
  DualNetModel& operator=(DualNetModel&&) noexcept = default;

  const ArchConfig& arch() const { return arch_; }
  bool uses_fast() const { return use_fast_; }
  const ClassRegistry& registry() const { return registry_; }
  std::size_t feature_dim() const { return arch_.widths.back(); }

  // ---- parameters -------------------------------------------------------

  ParamList slow_parameters() {
    ParamList out;
    for (auto& b : slow_) out = concat(std::move(out), b.parameters());
    return out;
  }
  ParamList projector_parameters() { return projector_.parameters(); }
  ParamList fast_parameters() {
    ParamList out;
    for (auto& g : fast_) out = concat(std::move(out), g.parameters());
    return out;
  }
  ParamList head_parameters() {
    ParamList out;
    for (auto& h : heads_) out = concat(std::move(out), h->parameters());
    return out;
  }
  /// What the self-supervised phase updates.
  ParamList ssl_parameters() { return concat(slow_parameters(), projector_parameters()); }
  /// What the supervised phase updates (the projector is excluded).
  ParamList supervised_parameters() {
    return concat(concat(slow_parameters(), fast_parameters()), head_parameters());
  }
  ParamList all_parameters() { return concat(concat(ssl_parameters(), fast_parameters()), head_parameters()); }

  std::vector<std::pair<std::string, Tensor*>> buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& b : slow_)
      for (auto& item : b.buffers()) out.push_back(item);
    return out;
  }

  static std::size_t count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto* p : params) n += p->value.size();
    return n;
  }

  // ---- class registry / heads ------------------------------------------

  /// Task-aware: creates the head for task `task` over `labels`.
  void add_task(std::size_t task, const std::vector<int>& labels) {
    registry_.add_task(task, labels);
    Rng rng(derive_seed(seed_, "head", task));
    auto head = std::make_unique<Dense>(LayerSpec::dense(feature_dim(), labels.size()), rng);
    rename_head(*head, task);
    heads_.push_back(std::move(head));
  }

  /// Task-free: grows the shared head for labels not yet seen.
  void observe_labels(std::span<const int> labels) {
    const std::size_t added = registry_.observe(labels);
    if (added == 0) return;
    Rng rng(derive_seed(seed_, "head.grow", heads_grown_++));
    if (heads_.empty()) {
      heads_.push_back(std::make_unique<Dense>(LayerSpec::dense(feature_dim(), added), rng));
      rename_head(*heads_.back(), 0);
    } else {
      heads_[0]->grow_outputs(added, rng);
    }
  }

  std::size_t head_classes(std::size_t head) const { return heads_.at(head)->spec().out_features; }

  // ---- slow learner ------------------------------------------------------

  /// h_1..h_L. Shapes: [N, widths[l], S / 2^(l+1), S / 2^(l+1)].
  std::vector<Tensor> slow_features(const Tensor& x, Mode mode) {
    check_input(x);
    cache_batch_ = x.dim(0);
    std::vector<Tensor> h;
    h.reserve(slow_.size());
    Tensor cur = x;
    for (auto& block : slow_) {
      cur = block.forward(cur, mode);
      h.push_back(cur);
    }
    return h;
  }

  /// Backpropagates per-level feature gradients (any may be empty).
  void slow_backward(std::vector<Tensor> grads) {
    Tensor carry;
    for (std::size_t l = slow_.size(); l-- > 0;) {
      Tensor g = grads.at(l);
      if (!carry.empty()) {
        if (g.empty()) {
          g = std::move(carry);
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += carry[i];
        }
      }
      if (g.empty()) g = Tensor(slow_[l].output_shape(level_input_shape(l)));
      carry = slow_[l].backward(g);
    }
  }

  /// Projector embedding for the SSL path.
  Tensor embed(const Tensor& x, Mode mode) {
    auto h = slow_features(x, mode);
    return projector_.forward(h.back(), mode);
  }
  void embed_backward(const Tensor& grad_z) {
    std::vector<Tensor> grads(slow_.size());
    grads.back() = projector_.backward(grad_z);
    slow_backward(std::move(grads));
  }

  // ---- fast learner ------------------------------------------------------

  /// Gated adaptation: m_l = g_l(h'_{l-1}), h'_0 = x, h'_l = D_l * h_l * m_l.
  /// Returns h'_L. Without a fast network, returns h_L.
  Tensor fast_adapt(const Tensor& x, const std::vector<Tensor>& features, const DropoutSpec& drop, Rng& rng) {
    if (!use_fast_) return features.back();
    if (features.size() != fast_.size()) throw ShapeError("fast_adapt: expected one feature map per block");
    cache_h_ = features;
    cache_m_.clear();
    cache_d_.clear();
    Tensor prev = x;
    for (std::size_t l = 0; l < fast_.size(); ++l) {
      Tensor m = fast_[l].forward(prev, drop.mode);
      if (m.shape() != features[l].shape()) {
        throw ShapeError("fast layer " + std::to_string(l) + " mask shape " + to_string(m.shape()) +
                         " differs from feature shape " + to_string(features[l].shape()));
      }
      Tensor out(m.shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = features[l][i] * m[i];
      Tensor d;
      if (drop.mode == Mode::train && drop.p > 0) {
        const std::size_t n = m.dim(0), c = m.dim(1), hh = m.dim(2), ww = m.dim(3);
        d = Tensor(m.shape());
        for (std::size_t s = 0; s < n; ++s) {
          Tensor ds = spatial_dropout_mask(drop.p, c, ww, hh, rng, drop.mode);
          std::copy(ds.storage().begin(), ds.storage().end(), d.data() + s * d.stride0());
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= d[i];
      }
      cache_m_.push_back(std::move(m));
      cache_d_.push_back(std::move(d));
      prev = std::move(out);
    }
    return prev;
  }

  /// Returns per-level gradients w.r.t. h_1..h_L; accumulates theta grads.
  std::vector<Tensor> fast_backward(const Tensor& grad_adapted) {
    std::vector<Tensor> grads(slow_.size());
    if (!use_fast_) {
      grads.back() = grad_adapted;
      return grads;
    }
    Tensor g = grad_adapted;
    for (std::size_t l = fast_.size(); l-- > 0;) {
      const Tensor& h = cache_h_[l];
      const Tensor& m = cache_m_[l];
      const Tensor& d = cache_d_[l];
      Tensor gh(h.shape()), gm(m.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Scalar gi = d.empty() ? g[i] : g[i] * d[i];
        gh[i] = gi * m[i];
        gm[i] = gi * h[i];
      }
      grads[l] = std::move(gh);
      g = fast_[l].backward(gm);
    }
    return grads;
  }

  // ---- classification ----------------------------------------------------

  /// Logits for a batch; rows are grouped by head (task-aware) or all in
  /// head 0 (task-free). `tasks` is empty for task-free use.
  std::vector<HeadGroup> forward(const Tensor& x, std::span<const std::size_t> tasks, Mode mode,
                                 const DropoutSpec& drop, Rng& rng) {
    auto h = slow_features(x, mode);
    DropoutSpec d = drop;
    if (mode == Mode::eval) d.mode = Mode::eval;
    Tensor adapted = fast_adapt(x, h, d, rng);
    pooled_ = gap_->forward(adapted, mode);
    groups_ = group_rows(x.dim(0), tasks);
    std::vector<HeadGroup> out;
    for (auto& [head, rows] : groups_) {
      if (head >= heads_.size()) throw std::out_of_range("no classifier head " + std::to_string(head));
      Tensor feats = gather_rows(pooled_, rows);
      out.push_back({head, rows, heads_[head]->forward(feats, mode)});
    }
    return out;
  }

  /// Backward for the matching forward(); one gradient per returned group.
  void backward(const std::vector<Tensor>& group_grads) {
    if (group_grads.size() != groups_.size()) throw std::logic_error("backward: group count mismatch");
    Tensor gpool(pooled_.shape());
    const std::size_t d = pooled_.dim(1);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      Tensor gf = heads_[groups_[g].first]->backward(group_grads[g]);
      const auto& rows = groups_[g].second;
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < d; ++k) gpool[rows[r] * d + k] += gf[r * d + k];
    }
    Tensor gadapted = gap_->backward(gpool);
    slow_backward(fast_backward(gadapted));
  }

  /// Eval-mode logits for a single-head batch (all rows on one task, or
  /// task-free). No dropout, no augmentation.
  Tensor predict(const Tensor& x, std::optional<std::size_t> task = std::nullopt) {
    const std::size_t head = registry_.head_for(task);
    if (head >= heads_.size()) throw std::out_of_range("no classifier head yet");
    std::vector<std::size_t> tasks;
    if (registry_.task_aware()) tasks.assign(x.dim(0), head);
    Rng unused(0);
    auto groups = forward(x, tasks, Mode::eval, DropoutSpec{0.0, Mode::eval}, unused);
    return std::move(groups.front().logits);
  }

 private:
  static void rename_head(Dense& head, std::size_t index) {
    for (auto* p : head.parameters()) p->name = "head." + std::to_string(index) + "." + p->name;
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != arch_.in_channels || x.dim(2) != arch_.image_size ||
        x.dim(3) != arch_.image_size) {
      throw ShapeError("model input " + to_string(x.shape()) + " does not match " +
                       to_string(arch_.input_shape(x.rank() ? x.dim(0) : 0)));
    }
  }

  Shape level_input_shape(std::size_t l) const {
    Shape s = arch_.input_shape(cache_batch_);
    for (std::size_t i = 0; i < l; ++i) s = slow_[i].output_shape(s);
    return s;
  }

  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> group_rows(std::size_t n,
                                                                            std::span<const std::size_t> tasks) {
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups;
    if (!registry_.task_aware()) {
      if (heads_.empty()) throw std::out_of_range("no classes observed yet");
      std::vector<std::size_t> rows(n);
      for (std::size_t i = 0; i < n; ++i) rows[i] = i;
      groups.emplace_back(0, std::move(rows));
      return groups;
    }
    if (tasks.size() != n) throw std::invalid_argument("task-aware forward needs one task id per row");
    std::map<std::size_t, std::vector<std::size_t>> by_head;
    for (std::size_t i = 0; i < n; ++i) by_head[registry_.head_for(tasks[i])].push_back(i);
    for (auto& [h, rows] : by_head) groups.emplace_back(h, std::move(rows));
    return groups;
  }

  ArchConfig arch_;
  bool use_fast_;
  ClassRegistry registry_;
  std::vector<Sequential> slow_;
  Sequential projector_;
  std::vector<Sequential> fast_;
  std::vector<std::unique_ptr<Dense>> heads_;
  std::unique_ptr<GlobalAvgPool> gap_;
  std::uint64_t seed_;
  std::size_t heads_grown_ = 0;

  std::size_t cache_batch_ = 0;
  std::vector<Tensor> cache_h_, cache_m_, cache_d_;
  Tensor pooled_;
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups_;

  friend class CheckpointAccess;
};

}  // namespace dualnet
