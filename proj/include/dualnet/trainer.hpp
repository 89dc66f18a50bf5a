#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/augment.hpp"
#include "dualnet/barlow.hpp"
#include "dualnet/losses.hpp"
#include "dualnet/memory.hpp"
#include "dualnet/metrics.hpp"
#include "dualnet/model.hpp"
#include "dualnet/optim.hpp"
#include "dualnet/stream.hpp"

namespace dualnet {

enum class Method { dualnet, dualnet_pp, finetune, er, derpp };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::dualnet: return "dualnet";
    case Method::dualnet_pp: return "dualnetpp";
    case Method::finetune: return "finetune";
    case Method::er: return "er";
    case Method::derpp: return "derpp";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "dualnet") return Method::dualnet;
  if (s == "dualnetpp" || s == "dualnet++") return Method::dualnet_pp;
  if (s == "finetune") return Method::finetune;
  if (s == "er") return Method::er;
  if (s == "derpp" || s == "der++") return Method::derpp;
  throw std::invalid_argument("unknown method '" + s + "' (expected dualnet, dualnetpp, finetune, er, derpp)");
}

inline bool uses_slow_learner(Method m) { return m == Method::dualnet || m == Method::dualnet_pp; }
inline bool uses_memory(Method m) { return m != Method::finetune; }
inline bool replays_logits(Method m) { return uses_slow_learner(m) || m == Method::derpp; }

/// Training hyper-parameters. Optional fields left empty are resolved from
/// the stream's protocol and mode by resolve().
struct TrainConfig {
  Method method = Method::dualnet;
  std::size_t ssl_iters = 3;                 ///< n: look-ahead rounds per incoming batch
  std::optional<std::size_t> inner_updates;  ///< N: 2 task-aware, 3 task-free
  LookaheadConfig lookahead;
  std::optional<Scalar> fast_lr;  ///< 0.03 online, 0.003 batch
  /// Supervised-phase rate for the backbone of DualNet methods; empty = fast_lr.
  std::optional<Scalar> slow_supervised_lr;
  Scalar lambda_bt = Scalar(2e-3);
  Scalar lambda_tr = 2;
  std::optional<Scalar> tau;          ///< 2 task-aware, 10 task-free
  std::optional<double> dropout_p;    ///< DualNet++ only: 0.1 online, 0.2 batch
  Scalar der_alpha = Scalar(0.1);
  std::size_t batch_size = 10;
  std::size_t replay_batch = 10;
  std::size_t ssl_batch = 10;             ///< memory samples joined to each SSL step
  std::optional<std::size_t> memory_size; ///< per task (ring) or per class (reservoir): 50 / 100
  std::size_t epochs = 1;                 ///< batch-mode streams only
  bool ssl_use_unlabeled = true;
  /// Keep batch-norm running statistics out of the SSL phase, so they track
  /// the undistorted inputs seen at inference.
  bool ssl_freeze_bn_stats = true;
  /// Task-free: re-take a new memory entry's logits once the batch that
  /// brought it has been trained on.
  bool refresh_after_update = true;
  AugmentPolicy ssl_augment;
  AugmentPolicy sup_augment = AugmentPolicy::crop_flip();
  std::size_t eval_batch = 100;
  ArchConfig arch;
  std::uint64_t seed = 0;

  /// Copy with every optional field filled in for `stream`.
  TrainConfig resolve(const TaskStream& stream) const {
    TrainConfig c = *this;
    const bool aware = stream.protocol == Protocol::task_aware;
    const bool online = stream.mode == StreamMode::online;
    if (!c.inner_updates) c.inner_updates = aware ? 2 : 3;
    if (!c.fast_lr) c.fast_lr = online ? Scalar(0.03) : Scalar(0.003);
    if (!c.slow_supervised_lr) c.slow_supervised_lr = c.fast_lr;
    if (!c.tau) c.tau = aware ? Scalar(2) : Scalar(10);
    if (!c.dropout_p) c.dropout_p = method == Method::dualnet_pp ? (online ? 0.1 : 0.2) : 0.0;
    if (!c.memory_size) c.memory_size = aware ? 50 : 100;
    if (online) c.epochs = 1;
    c.validate();
    return c;
  }

  void validate() const {
    if (inner_updates && *inner_updates < 1) throw std::invalid_argument("inner_updates (N) must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (fast_lr && !(*fast_lr > 0)) throw std::invalid_argument("fast_lr must be > 0");
    if (slow_supervised_lr && !(*slow_supervised_lr >= 0)) throw std::invalid_argument("slow_supervised_lr must be >= 0");
    if (tau && !(*tau > 0)) throw std::invalid_argument("tau must be > 0");
    if (dropout_p && !(*dropout_p >= 0 && *dropout_p < 1)) throw std::invalid_argument("dropout_p must lie in [0, 1)");
    if (dropout_p && *dropout_p > 0 && method != Method::dualnet_pp)
      throw std::invalid_argument("dropout_p applies to dualnetpp only");
    if (lambda_tr < 0 || lambda_bt < 0 || der_alpha < 0) throw std::invalid_argument("loss weights must be >= 0");
    lookahead.validate();
    arch.validate();
  }
};

struct RunResult {
  AccuracyMatrix matrix;
  std::vector<double> task_seconds;
  TrainConfig config;  ///< resolved
  std::uint64_t seed = 0;
  std::size_t supervised_batches = 0;
};

/// Thrown when a loss or gradient becomes non-finite; says where.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& phase, std::size_t task, std::size_t batch, const std::string& detail)
      : NumericError("non-finite loss in " + phase + " phase, task " + std::to_string(task) + ", batch " +
                     std::to_string(batch) + ": " + detail) {}
};

/// Model matching a stream's input format and protocol.
inline DualNetModel make_model(const TrainConfig& cfg, const TaskStream& stream) {
  ArchConfig arch = cfg.arch;
  arch.in_channels = stream.format.channels;
  arch.image_size = stream.format.size;
  return DualNetModel(arch, uses_slow_learner(cfg.method), stream.protocol == Protocol::task_aware,
                      derive_seed(cfg.seed, "model"));
}

/// Ring (task-aware) or reservoir (task-free) memory sized per the resolved
/// config. Finetune gets capacity 0.
inline EpisodicMemory make_memory(const TrainConfig& resolved, const TaskStream& stream) {
  if (stream.protocol == Protocol::task_aware)
    return EpisodicMemory(MemoryPolicy::ring, uses_memory(resolved.method) ? *resolved.memory_size : 0);
  std::size_t classes = 0;
  std::vector<int> seen;
  for (const auto& t : stream.tasks)
    for (int l : t.label_set())
      if (std::find(seen.begin(), seen.end(), l) == seen.end()) seen.push_back(l);
  classes = seen.size();
  return EpisodicMemory(MemoryPolicy::reservoir, uses_memory(resolved.method) ? *resolved.memory_size * classes : 0);
}

/// One labeled/unlabeled training batch as delivered by the stream.
struct IncomingBatch {
  Tensor x;
  std::vector<int> labels;  ///< kUnlabeled for masked samples
  std::size_t task = 0;

  std::vector<std::size_t> labeled_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != kUnlabeled) rows.push_back(i);
    return rows;
  }
};

/// Supervised replay objective over one forward pass. Rows [0, n_in) are
/// incoming samples, the rest are memory entries `mem` (same order).
struct ReplayLoss {
  Scalar loss = 0;
  std::vector<Tensor> group_grads;
};

inline ReplayLoss replay_loss(const std::vector<HeadGroup>& groups, const ClassRegistry& registry,
                              std::span<const int> in_labels, std::optional<std::size_t> in_task,
                              const std::vector<MemoryEntry>& mem, Method method, Scalar lambda_tr, Scalar tau,
                              Scalar der_alpha) {
  const std::size_t n_in = in_labels.size();
  ReplayLoss out;
  for (const auto& g : groups) {
    const std::size_t k = g.logits.dim(1);
    Tensor grad(g.logits.shape());
    for (std::size_t r = 0; r < g.rows.size(); ++r) {
      const std::size_t row = g.rows[r];
      Tensor logits({1, k}, std::vector<Scalar>(g.logits.data() + r * k, g.logits.data() + (r + 1) * k));
      auto accumulate = [&](const LossResult& lr, Scalar w, std::size_t width) {
        out.loss += w * lr.loss;
        for (std::size_t j = 0; j < width; ++j) grad[r * k + j] += w * lr.grad[j];
      };
      if (row < n_in) {
        const std::size_t target = registry.index_of(in_labels[row], in_task);
        accumulate(cross_entropy(logits, target), Scalar(1) / static_cast<Scalar>(n_in), k);
        continue;
      }
      const MemoryEntry& e = mem[row - n_in];
      const Scalar w = Scalar(1) / static_cast<Scalar>(mem.size());
      const std::size_t target = registry.index_of(e.label, registry.task_aware() ? e.task_id : std::nullopt);
      accumulate(cross_entropy(logits, target), w, k);
      if (!replays_logits(method)) continue;
      if (!e.soft_logits) throw std::invalid_argument("memory entry without a logit snapshot");
      // A snapshot taken before the shared head grew covers its first classes only.
      const std::size_t width = std::min(k, e.soft_logits->size());
      Tensor current({1, width}, std::vector<Scalar>(logits.data(), logits.data() + width));
      Tensor target_logits({1, width}, std::vector<Scalar>(e.soft_logits->begin(), e.soft_logits->begin() + width));
      if (method == Method::derpp) {
        accumulate(logit_mse(current, target_logits), w * der_alpha, width);
      } else if (lambda_tr > 0) {
        accumulate(kl_divergence(current, target_logits, tau), w * lambda_tr, width);
      }
    }
    out.group_grads.push_back(std::move(grad));
  }
  return out;
}

/// Trainer state for one run. train_stream() below is the usual entry point;
/// the phases are public so tests can drive them one at a time.
class ContinualTrainer {
 public:
  ContinualTrainer(TrainConfig resolved, DualNetModel& model, EpisodicMemory& memory)
      : cfg_(std::move(resolved)),
        model_(model),
        memory_(memory),
        ssl_store_(MemoryPolicy::reservoir, memory.capacity()),
        memory_rng_(derive_seed(cfg_.seed, "memory")),
        sample_rng_(derive_seed(cfg_.seed, "sample")),
        ssl_rng_(derive_seed(cfg_.seed, "ssl.sample")),
        dropout_rng_(derive_seed(cfg_.seed, "dropout")) {
    cfg_.validate();
    if (!cfg_.inner_updates || !cfg_.fast_lr || !cfg_.tau || !cfg_.dropout_p)
      throw std::invalid_argument("ContinualTrainer needs a resolved config");
  }

  const TrainConfig& config() const { return cfg_; }
  const EpisodicMemory& ssl_store() const { return ssl_store_; }
  std::uint64_t sample_draws() const { return sample_rng_.draws(); }

  void set_position(std::size_t task, std::size_t batch) {
    task_ = task;
    batch_ = batch;
  }

  /// Registers heads / classes for a batch before it is used.
  void prepare_heads(const IncomingBatch& b) {
    if (model_.registry().task_aware()) return;
    std::vector<int> labeled;
    for (int l : b.labels)
      if (l != kUnlabeled) labeled.push_back(l);
    model_.observe_labels(labeled);
  }

  /// Memory update: labeled samples go to the replay memory (task-free
  /// entries carry the model's current logits), unlabeled ones to the
  /// SSL-only store.
  void update_memory(const IncomingBatch& b) {
    const bool aware = model_.registry().task_aware();
    Tensor snapshot;
    if (!aware && replays_logits(cfg_.method) && memory_.capacity() > 0 && !model_.registry().shared().empty()) snapshot = model_.predict(b.x);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      MemoryEntry e;
      e.input = slice_rows(b.x, i, i + 1).reshaped(Shape(b.x.shape().begin() + 1, b.x.shape().end()));
      e.label = b.labels[i];
      e.task_id = b.task;
      if (e.label == kUnlabeled) {
        if (uses_slow_learner(cfg_.method)) ssl_store_.insert(std::move(e), memory_rng_);
        continue;
      }
      if (!snapshot.empty()) {
        const std::size_t k = snapshot.dim(1);
        e.soft_logits = std::vector<Scalar>(snapshot.data() + i * k, snapshot.data() + (i + 1) * k);
      }
      const auto slot = memory_.insert(std::move(e), memory_rng_);
      if (slot && !snapshot.empty()) fresh_slots_.emplace_back(*slot, i);
    }
  }

  /// Task-free: replaces the insertion-time logits of this batch's new
  /// entries with the model's logits after the batch's supervised updates.
  void refresh_fresh_snapshots(const IncomingBatch& b) {
    if (!cfg_.refresh_after_update || fresh_slots_.empty()) {
      fresh_slots_.clear();
      return;
    }
    const Tensor logits = model_.predict(b.x);
    const std::size_t k = logits.dim(1);
    // In order, so a slot overwritten twice ends with its final occupant's logits.
    for (auto [slot, row] : fresh_slots_)
      memory_.slot(slot).soft_logits = std::vector<Scalar>(logits.data() + row * k, logits.data() + (row + 1) * k);
    fresh_slots_.clear();
  }

  /// n look-ahead rounds of Barlow Twins on views of (memory sample + batch).
  /// Touches only the backbone and projector.
  void ssl_phase(const Tensor& incoming) {
    if (cfg_.ssl_iters == 0 || !uses_slow_learner(cfg_.method)) return;
    const ParamList params = model_.ssl_parameters();
    auto closure = [&]() -> Scalar {
      std::vector<const MemoryEntry*> pool = memory_.entries();
      if (cfg_.ssl_use_unlabeled)
        for (const auto* e : ssl_store_.entries()) pool.push_back(e);
      std::vector<MemoryEntry> picked;
      const std::size_t take = std::min(cfg_.ssl_batch, pool.size());
      for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + ssl_rng_.index(pool.size() - i);
        std::swap(pool[i], pool[j]);
        picked.push_back(*pool[i]);
      }
      const Tensor x = concat_rows(incoming, stack_inputs(picked));
      const std::uint64_t view_seed = derive_seed(cfg_.seed, "ssl.views", ssl_steps_++);
      const ViewPair views = make_views(x, cfg_.ssl_augment, view_seed);
      const std::size_t b = x.dim(0);
      const Tensor z = model_.embed(concat_rows(views.view_a, views.view_b), Mode::train);
      const Tensor za = slice_rows(z, 0, b), zb = slice_rows(z, b, 2 * b);
      const BarlowResult r = barlow_twins(za, zb, cfg_.lambda_bt);
      model_.embed_backward(concat_rows(r.grad_a, r.grad_b));
      last_ssl_loss_ = r.loss;
      return r.loss;
    };
    if (incoming.dim(0) + std::min(cfg_.ssl_batch, memory_.size() + ssl_store_.size()) < 2) return;
    std::vector<Tensor> saved;
    if (cfg_.ssl_freeze_bn_stats)
      for (const auto& [name, buf] : model_.buffers()) saved.push_back(*buf);
    try {
      for (std::size_t round = 0; round < cfg_.ssl_iters; ++round) lookahead_round(params, closure, cfg_.lookahead);
    } catch (const NumericError& e) {
      throw TrainingDiverged("self-supervised", task_, batch_, e.what());
    }
    if (cfg_.ssl_freeze_bn_stats) {
      std::size_t i = 0;
      for (const auto& [name, buf] : model_.buffers()) *buf = saved[i++];
    }
  }

  /// N SGD updates of the replay objective on the labeled part of the batch,
  /// each with a fresh memory sample. Returns the last loss (0 when skipped).
  Scalar supervised_phase(const IncomingBatch& b) {
    const auto rows = b.labeled_rows();
    if (rows.empty()) return 0;
    const Tensor x_in = gather_rows(b.x, rows);
    std::vector<int> y_in;
    for (auto r : rows) y_in.push_back(b.labels[r]);
    const bool aware = model_.registry().task_aware();
    const ParamList params = model_.supervised_parameters();
    const DropoutSpec drop{*cfg_.dropout_p, Mode::train};
    Scalar last = 0;
    for (std::size_t step = 0; step < *cfg_.inner_updates; ++step) {
      std::vector<MemoryEntry> mem;
      if (uses_memory(cfg_.method) && cfg_.replay_batch > 0 && !memory_.empty()) {
        // Task-aware replay draws from finished tasks, whose entries carry snapshots.
        mem = memory_.sample(cfg_.replay_batch, sample_rng_,
                             aware ? std::optional<std::size_t>(b.task) : std::nullopt);
      }
      Tensor x = concat_rows(x_in, stack_inputs(mem));
      x = augment_batch(x, cfg_.sup_augment, derive_seed(cfg_.seed, "sup.augment", sup_steps_++));
      std::vector<std::size_t> tasks;
      if (aware) {
        tasks.assign(x_in.dim(0), b.task);
        for (const auto& e : mem) tasks.push_back(*e.task_id);
      }
      zero_grads(params);
      ReplayLoss loss;
      try {
        const auto groups = model_.forward(x, tasks, Mode::train, drop, dropout_rng_);
        loss = replay_loss(groups, model_.registry(), y_in, aware ? std::optional(b.task) : std::nullopt, mem,
                           cfg_.method, cfg_.lambda_tr, *cfg_.tau, cfg_.der_alpha);
        if (!std::isfinite(loss.loss)) throw NumericError("loss is not finite");
        model_.backward(loss.group_grads);
      } catch (const TrainingDiverged&) {
        throw;
      } catch (const NumericError& e) {
        throw TrainingDiverged("supervised", task_, batch_, e.what());
      }
      for (const auto* p : params)
        if (!p->grad.all_finite()) throw TrainingDiverged("supervised", task_, batch_, "gradient of " + p->name);
      if (uses_slow_learner(cfg_.method)) {
        sgd_step(model_.slow_parameters(), *cfg_.slow_supervised_lr);
        sgd_step(concat(model_.fast_parameters(), model_.head_parameters()), *cfg_.fast_lr);
      } else {
        sgd_step(params, *cfg_.fast_lr);
      }
      last = loss.loss;
    }
    return last;
  }

  /// Task-aware end-of-task snapshot for the methods that replay logits.
  void end_task(std::size_t task) {
    if (!model_.registry().task_aware()) return;
    if (replays_logits(cfg_.method)) snapshot_soft_labels(memory_, model_, task);
  }

  Scalar last_ssl_loss() const { return last_ssl_loss_; }

 private:
  TrainConfig cfg_;
  DualNetModel& model_;
  EpisodicMemory& memory_;
  EpisodicMemory ssl_store_;
  Rng memory_rng_, sample_rng_, ssl_rng_, dropout_rng_;
  std::uint64_t ssl_steps_ = 0, sup_steps_ = 0;
  std::size_t task_ = 0, batch_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> fresh_slots_;
  Scalar last_ssl_loss_ = 0;
};

/// Accuracy of `model` on task `j`'s validation split under the protocol's
/// head rule (task head j, or the shared head over all classes seen).
inline double evaluate_task(DualNetModel& model, const TaskData& task, std::size_t j, std::size_t eval_batch) {
  const std::size_t n = task.val_y.size();
  if (n == 0) throw std::invalid_argument("task " + std::to_string(j) + " has no validation samples");
  const bool aware = model.registry().task_aware();
  const auto& classes = model.registry().classes(model.registry().head_for(aware ? std::optional(j) : std::nullopt));
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += eval_batch) {
    const std::size_t end = std::min(n, start + eval_batch);
    const Tensor logits = model.predict(slice_rows(task.val_x, start, end), aware ? std::optional(j) : std::nullopt);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < end - start; ++i) {
      const Scalar* row = logits.data() + i * k;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      if (classes[best] == task.val_y[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Optional observer invoked after each supervised batch and each task.
struct TrainHooks {
  std::function<void(std::size_t task, std::size_t batch, const ContinualTrainer&)> after_batch;
  std::function<void(std::size_t task, const AccuracyMatrix&)> after_task;
};

/// Runs the whole stream: per batch, memory update, slow phase, supervised
/// phase; per task, snapshot then evaluation of tasks 0..i.
inline RunResult train_stream(const TrainConfig& config, const TaskStream& stream, EpisodicMemory& memory,
                              DualNetModel& model, const TrainHooks& hooks = {}) {
  const TrainConfig cfg = config.resolve(stream);
  if (model.arch().in_channels != stream.format.channels || model.arch().image_size != stream.format.size) {
    throw ShapeError("model expects " + to_string(model.arch().input_shape(1)) + " inputs, stream delivers " +
                     std::to_string(stream.format.channels) + "x" + std::to_string(stream.format.size));
  }
  ContinualTrainer trainer(cfg, model, memory);
  RunResult result;
  result.config = cfg;
  result.seed = cfg.seed;
  result.matrix = AccuracyMatrix(stream.size());
  const bool aware = stream.protocol == Protocol::task_aware;
  Rng order_rng(derive_seed(cfg.seed, "order"));

  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    const TaskData& task = stream.tasks[t];
    if (aware) model.add_task(t, task.label_set());
    std::size_t batch_index = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(task.train_size());
      std::iota(order.begin(), order.end(), 0);
      if (stream.mode == StreamMode::batch) order_rng.shuffle(std::span(order));
      for (std::size_t s = 0; s < order.size(); s += cfg.batch_size, ++batch_index) {
        const std::size_t e = std::min(order.size(), s + cfg.batch_size);
        const std::span<const std::size_t> rows(order.data() + s, e - s);
        IncomingBatch b;
        b.x = gather_rows(task.train_x, rows);
        b.task = t;
        for (auto r : rows) b.labels.push_back(task.labeled[r] ? task.train_y[r] : kUnlabeled);
        trainer.set_position(t, batch_index);
        trainer.prepare_heads(b);
        if (epoch == 0) trainer.update_memory(b);
        trainer.ssl_phase(b.x);
        trainer.supervised_phase(b);
        trainer.refresh_fresh_snapshots(b);
        ++result.supervised_batches;
        if (hooks.after_batch) hooks.after_batch(t, batch_index, trainer);
      }
    }
    trainer.end_task(t);
    for (std::size_t j = 0; j <= t; ++j)
      result.matrix.set(t, j, evaluate_task(model, stream.tasks[j], j, cfg.eval_batch));
    result.task_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (hooks.after_task) hooks.after_task(t, result.matrix);
  }
  return result;
}

/// Fresh model and memory for `config`, then train_stream.
inline RunResult run_once(const TrainConfig& config, const TaskStream& stream, const TrainHooks& hooks = {}) {
  const TrainConfig cfg = config.resolve(stream);
  DualNetModel model = make_model(cfg, stream);
  EpisodicMemory memory = make_memory(cfg, stream);
  return train_stream(cfg, stream, memory, model, hooks);
}

}  // namespace dualnet
