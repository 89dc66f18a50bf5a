#include <gtest/gtest.h>

#include "dualnet/gradcheck.hpp"
#include "dualnet/trainer.hpp"

using namespace dualnet;

namespace {

TaskStream tiny_stream(Protocol protocol = Protocol::task_free, std::size_t per_class = 10, std::uint64_t seed = 1) {
  static const Source src = synthetic_source("blobs", 0, 3, SyntheticCounts{30, 10}, 8);
  SplitOptions o;
  o.train_per_class = per_class;
  o.val_per_class = 5;
  o.format = {2, 8};
  TaskStream s = split_stream(src, 2, 2, seed, o);
  s.protocol = protocol;
  return s;
}

TrainConfig tiny_config(Method m = Method::dualnet) {
  TrainConfig c;
  c.method = m;
  c.arch = detail::tiny_arch(true);
  c.ssl_iters = 1;
  c.batch_size = 5;
  c.replay_batch = 4;
  c.ssl_batch = 4;
  c.memory_size = 3;
  c.eval_batch = 7;
  c.seed = 11;
  return c;
}

ParamSet snapshot(const ParamList& ps) { return ParamSet::capture(ps); }

bool same(const ParamSet& a, const ParamList& now) { return ParamSet::distance(a, ParamSet::capture(now)) == 0; }

IncomingBatch first_batch(const TaskStream& s, std::size_t n = 5, std::size_t task = 0) {
  IncomingBatch b;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  b.x = gather_rows(s.tasks[task].train_x, rows);
  for (auto r : rows) b.labels.push_back(s.tasks[task].train_y[r]);
  b.task = task;
  return b;
}

/// Model, memory and trainer built the way train_stream builds them.
struct Rig {
  TaskStream stream;
  TrainConfig cfg;
  DualNetModel model;
  EpisodicMemory memory;
  ContinualTrainer trainer;

  explicit Rig(TrainConfig c, Protocol p = Protocol::task_free)
      : stream(tiny_stream(p)),
        cfg(c.resolve(stream)),
        model(make_model(cfg, stream)),
        memory(make_memory(cfg, stream)),
        trainer(cfg, model, memory) {
    if (p == Protocol::task_aware) model.add_task(0, stream.tasks[0].label_set());
  }
};

}  // namespace

TEST(Resolve, ProtocolDefaults) {
  TrainConfig c;
  const TaskStream free_online = tiny_stream();
  TaskStream aware_batch = tiny_stream(Protocol::task_aware);
  aware_batch.mode = StreamMode::batch;
  const TrainConfig f = c.resolve(free_online), a = c.resolve(aware_batch);
  EXPECT_EQ(*f.inner_updates, 3u);
  EXPECT_EQ(*a.inner_updates, 2u);
  EXPECT_EQ(*f.tau, 10);
  EXPECT_EQ(*a.tau, 2);
  EXPECT_EQ(*f.memory_size, 100u);
  EXPECT_EQ(*a.memory_size, 50u);
  EXPECT_EQ(*f.fast_lr, Scalar(0.03));
  EXPECT_EQ(*a.fast_lr, Scalar(0.003));
  EXPECT_EQ(*f.dropout_p, 0.0);
  c.method = Method::dualnet_pp;
  EXPECT_EQ(*c.resolve(free_online).dropout_p, 0.1);
  EXPECT_EQ(*c.resolve(aware_batch).dropout_p, 0.2);
  EXPECT_EQ(c.lookahead.k, 3u);
  EXPECT_EQ(c.lookahead.epsilon, Scalar(3e-4));
  EXPECT_EQ(c.lookahead.beta, Scalar(0.5));
  EXPECT_EQ(c.lambda_bt, Scalar(2e-3));
  EXPECT_EQ(c.lambda_tr, 2);
}

TEST(Resolve, UnresolvedConfigRejectedByTrainer) {
  const TaskStream s = tiny_stream();
  const TrainConfig c = tiny_config();
  DualNetModel model = make_model(c, s);
  EpisodicMemory memory(MemoryPolicy::reservoir, 4);
  EXPECT_THROW(ContinualTrainer(c, model, memory), std::invalid_argument);
}

TEST(Memory, SizedPerClassOrPerTaskAndEmptyForFinetune) {
  const TaskStream free_s = tiny_stream(), aware_s = tiny_stream(Protocol::task_aware);
  TrainConfig c = tiny_config();
  EXPECT_EQ(make_memory(c.resolve(free_s), free_s).capacity(), 3u * 4);
  EXPECT_EQ(make_memory(c.resolve(aware_s), aware_s).policy(), MemoryPolicy::ring);
  EXPECT_EQ(make_memory(c.resolve(aware_s), aware_s).capacity(), 3u);
  c.method = Method::finetune;
  EXPECT_EQ(make_memory(c.resolve(free_s), free_s).capacity(), 0u);
}

TEST(SslPhase, TouchesOnlyBackboneAndProjector) {
  Rig rig(tiny_config());
  const IncomingBatch b = first_batch(rig.stream);
  rig.trainer.prepare_heads(b);
  rig.trainer.update_memory(b);
  const ParamSet slow = snapshot(rig.model.slow_parameters()), proj = snapshot(rig.model.projector_parameters());
  const ParamSet fast = snapshot(rig.model.fast_parameters()), head = snapshot(rig.model.head_parameters());
  rig.trainer.ssl_phase(b.x);
  EXPECT_FALSE(same(slow, rig.model.slow_parameters()));
  EXPECT_FALSE(same(proj, rig.model.projector_parameters()));
  EXPECT_TRUE(same(fast, rig.model.fast_parameters()));
  EXPECT_TRUE(same(head, rig.model.head_parameters()));
}

TEST(SslPhase, FreezesBatchNormStatistics) {
  Rig rig(tiny_config());
  const IncomingBatch b = first_batch(rig.stream);
  std::vector<Tensor> before;
  for (const auto& [name, buf] : rig.model.buffers()) before.push_back(*buf);
  rig.trainer.ssl_phase(b.x);
  std::size_t i = 0;
  for (const auto& [name, buf] : rig.model.buffers()) EXPECT_EQ(*buf, before[i++]) << name;
}

TEST(SslPhase, ZeroRoundsLeaveBackboneUnchanged) {
  TrainConfig c = tiny_config();
  c.ssl_iters = 0;
  Rig rig(c);
  const IncomingBatch b = first_batch(rig.stream);
  rig.trainer.update_memory(b);
  const ParamSet slow = snapshot(rig.model.ssl_parameters());
  rig.trainer.ssl_phase(b.x);
  EXPECT_TRUE(same(slow, rig.model.ssl_parameters()));
}

TEST(SslPhase, SkippedByBaselines) {
  Rig rig(tiny_config(Method::er));
  const ParamSet slow = snapshot(rig.model.slow_parameters());
  rig.trainer.ssl_phase(first_batch(rig.stream).x);
  EXPECT_TRUE(same(slow, rig.model.slow_parameters()));
}

TEST(SslPhase, BarlowLossOnAFixedProbeMostlyDecreases) {
  TrainConfig c = tiny_config();
  c.ssl_augment = AugmentPolicy::identity();
  c.lookahead.epsilon = Scalar(0.01);
  Rig rig(c);
  const Tensor probe = first_batch(rig.stream, 8).x;
  auto probe_loss = [&] {
    const Tensor z = rig.model.embed(concat_rows(probe, probe), Mode::train);
    return barlow_twins(slice_rows(z, 0, 8), slice_rows(z, 8, 16), c.lambda_bt).loss;
  };
  std::vector<Scalar> losses{probe_loss()};
  for (int round = 0; round < 20; ++round) {
    rig.trainer.ssl_phase(probe);
    losses.push_back(probe_loss());
  }
  int down = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) down += losses[i] <= losses[i - 1];
  EXPECT_GE(down, 14) << "loss went up in " << 20 - down << " of 20 rounds";
  EXPECT_LT(losses.back(), losses.front());
}

TEST(SupervisedPhase, DrawsOneMemorySamplePerInnerUpdate) {
  Rig rig(tiny_config(Method::er));
  for (std::size_t i = 0; i < 3; ++i) {
    IncomingBatch b = first_batch(rig.stream);
    rig.trainer.prepare_heads(b);
    rig.trainer.update_memory(b);
  }
  ASSERT_GT(rig.memory.size(), rig.cfg.replay_batch);
  const IncomingBatch b = first_batch(rig.stream);
  rig.trainer.supervised_phase(b);
  // Replay the sampler with an independent generator on the same seed.
  Rng ref(derive_seed(rig.cfg.seed, "sample"));
  for (std::size_t k = 0; k < *rig.cfg.inner_updates; ++k) rig.memory.sample(rig.cfg.replay_batch, ref);
  EXPECT_EQ(rig.trainer.sample_draws(), ref.draws());
  EXPECT_GE(rig.trainer.sample_draws(), *rig.cfg.inner_updates * rig.cfg.replay_batch);
}

TEST(SupervisedPhase, UnlabeledBatchLeavesWeightsAlone) {
  Rig rig(tiny_config());
  IncomingBatch b = first_batch(rig.stream);
  rig.trainer.prepare_heads(b);
  for (int& l : b.labels) l = kUnlabeled;
  const ParamSet all = snapshot(rig.model.all_parameters());
  EXPECT_EQ(rig.trainer.supervised_phase(b), 0);
  EXPECT_TRUE(same(all, rig.model.all_parameters()));
  rig.trainer.update_memory(b);
  EXPECT_TRUE(rig.memory.empty());
  EXPECT_EQ(rig.trainer.ssl_store().size(), 5u);
}

TEST(SupervisedPhase, LeavesProjectorAlone) {
  Rig rig(tiny_config());
  const IncomingBatch b = first_batch(rig.stream);
  rig.trainer.prepare_heads(b);
  const ParamSet proj = snapshot(rig.model.projector_parameters());
  const ParamSet fast = snapshot(rig.model.fast_parameters());
  rig.trainer.supervised_phase(b);
  EXPECT_TRUE(same(proj, rig.model.projector_parameters()));
  EXPECT_FALSE(same(fast, rig.model.fast_parameters()));
}

TEST(SupervisedPhase, TaskAwareReplaySkipsCurrentTask) {
  Rig rig(tiny_config(), Protocol::task_aware);
  const IncomingBatch b = first_batch(rig.stream);
  rig.trainer.update_memory(b);  // task-0 entries, no snapshot yet
  EXPECT_NO_THROW(rig.trainer.supervised_phase(b));
  EXPECT_EQ(rig.trainer.sample_draws(), 0u);
}

TEST(TaskFree, FreshEntriesTakeLogitsAfterTheirUpdate) {
  Rig rig(tiny_config());
  IncomingBatch b = first_batch(rig.stream);
  rig.trainer.prepare_heads(b);
  rig.trainer.update_memory(b);
  rig.trainer.supervised_phase(b);
  rig.trainer.refresh_fresh_snapshots(b);
  b = first_batch(rig.stream, 5);
  for (const auto* e : rig.memory.entries()) {
    if (!e->soft_logits) continue;
    const Tensor now = rig.model.predict(e->input.reshaped({1, 2, 8, 8}));
    for (std::size_t j = 0; j < e->soft_logits->size(); ++j) EXPECT_EQ((*e->soft_logits)[j], now[j]);
  }
}

TEST(TrainStream, BatchesPerTaskIsCeilOfTaskOverBatch) {
  TrainConfig c = tiny_config(Method::er);
  c.batch_size = 6;
  std::vector<std::size_t> per_task(2, 0);
  TrainHooks hooks;
  hooks.after_batch = [&](std::size_t t, std::size_t, const ContinualTrainer&) { ++per_task[t]; };
  const RunResult r = run_once(c, tiny_stream(), hooks);
  EXPECT_EQ(per_task, (std::vector<std::size_t>{4, 4}));  // ceil(20 / 6)
  EXPECT_EQ(r.supervised_batches, 8u);
  EXPECT_TRUE(r.matrix.complete());
  EXPECT_EQ(r.task_seconds.size(), 2u);
}

TEST(TrainStream, BatchModeRunsEveryEpoch) {
  TrainConfig c = tiny_config(Method::finetune);
  c.epochs = 3;
  TaskStream s = tiny_stream(Protocol::task_aware);
  s.mode = StreamMode::batch;
  EXPECT_EQ(run_once(c, s).supervised_batches, 2u * 3 * 4);
  s.mode = StreamMode::online;
  EXPECT_EQ(run_once(c, s).supervised_batches, 2u * 4);
}

TEST(TrainStream, DeterministicUnderSeed) {
  for (Method m : {Method::dualnet, Method::dualnet_pp, Method::derpp}) {
    const TrainConfig c = tiny_config(m);
    const RunResult a = run_once(c, tiny_stream()), b = run_once(c, tiny_stream());
    EXPECT_EQ(a.matrix, b.matrix) << to_string(m);
  }
}

TEST(TrainStream, EveryMethodRunsBothProtocols) {
  for (Method m : {Method::dualnet, Method::dualnet_pp, Method::finetune, Method::er, Method::derpp})
    for (Protocol p : {Protocol::task_aware, Protocol::task_free}) {
      const RunResult r = run_once(tiny_config(m), tiny_stream(p));
      EXPECT_TRUE(r.matrix.complete()) << to_string(m);
    }
}

TEST(TrainStream, FormatMismatchReported) {
  const TaskStream s = tiny_stream();
  TrainConfig c = tiny_config();
  const TrainConfig resolved = c.resolve(s);
  DualNetModel model(detail::tiny_arch(true), true, false, 1);  // 2 channels, 8x8
  TaskStream other = s;
  other.format = {3, 8};
  EpisodicMemory memory = make_memory(resolved, s);
  EXPECT_THROW(train_stream(c, other, memory, model), ShapeError);
}

TEST(TrainStream, DivergenceNamesPhaseAndPosition) {
  const TaskStream s = tiny_stream();
  const TrainConfig c = tiny_config(Method::er).resolve(s);
  DualNetModel model = make_model(c, s);
  EpisodicMemory memory = make_memory(c, s);
  model.slow_parameters().front()->value[0] = std::numeric_limits<Scalar>::quiet_NaN();
  try {
    train_stream(c, s, memory, model);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("supervised phase"), std::string::npos) << msg;
    EXPECT_NE(msg.find("task 0, batch 0"), std::string::npos) << msg;
  }
}

TEST(EvaluateTask, CountsCorrectPredictions) {
  const TaskStream s = tiny_stream(Protocol::task_aware);
  DualNetModel model = make_model(tiny_config().resolve(s), s);
  model.add_task(0, s.tasks[0].label_set());
  const double acc = evaluate_task(model, s.tasks[0], 0, 3);
  const Tensor logits = model.predict(s.tasks[0].val_x, 0);
  std::size_t correct = 0;
  const auto labels = s.tasks[0].label_set();
  for (std::size_t i = 0; i < s.tasks[0].val_y.size(); ++i) {
    const Scalar* row = logits.data() + i * 2;
    correct += labels[row[1] > row[0] ? 1 : 0] == s.tasks[0].val_y[i];
  }
  EXPECT_DOUBLE_EQ(acc, double(correct) / s.tasks[0].val_y.size());
}
