#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dualnet/gradcheck.hpp"
#include "dualnet/losses.hpp"
#include "dualnet/memory.hpp"

using namespace dualnet;

namespace {

MemoryEntry entry(int label, std::optional<std::size_t> task = std::nullopt, Shape shape = {1, 2, 2}) {
  MemoryEntry e;
  e.input = Tensor(shape, Scalar(label));
  e.label = label;
  e.task_id = task;
  return e;
}

std::multiset<int> labels_of(const EpisodicMemory& m) {
  std::multiset<int> out;
  for (const auto* e : m.entries()) out.insert(e->label);
  return out;
}

}  // namespace

TEST(RingMemory, KeepsMostRecentPerTask) {
  EpisodicMemory m(MemoryPolicy::ring, 2);
  Rng rng(0);
  for (int i = 1; i <= 3; ++i) m.insert(entry(i, 0), rng);
  EXPECT_EQ(labels_of(m), (std::multiset<int>{2, 3}));
  EXPECT_EQ(m.seen(), 3u);
}

TEST(RingMemory, SegmentsAreIndependent) {
  EpisodicMemory m(MemoryPolicy::ring, 3);
  Rng rng(0);
  for (int i = 0; i < 10; ++i) m.insert(entry(i, 0), rng);
  m.insert(entry(100, 1), rng);
  EXPECT_EQ(m.segment_size(0), 3u);
  EXPECT_EQ(m.segment_size(1), 1u);
  EXPECT_EQ(m.size(), 4u);
  EXPECT_EQ(m.entries(1).size(), 3u);
  EXPECT_TRUE(m.entries(0).empty());
}

TEST(RingMemory, InsertWithoutTaskRejected) {
  EpisodicMemory m(MemoryPolicy::ring, 2);
  Rng rng(0);
  EXPECT_THROW(m.insert(entry(1), rng), std::invalid_argument);
}

TEST(RingMemory, ZeroCapacityStoresNothing) {
  EpisodicMemory m(MemoryPolicy::ring, 0);
  Rng rng(0);
  m.insert(entry(1, 0), rng);
  EXPECT_TRUE(m.empty());
}

TEST(ReservoirMemory, KeepsEverythingUntilFull) {
  EpisodicMemory m(MemoryPolicy::reservoir, 8);
  Rng rng(1);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(m.insert(entry(i), rng), std::optional<std::size_t>(i));
  EXPECT_EQ(labels_of(m), (std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(ReservoirMemory, EachItemRetainedWithProbabilityMOverN) {
  constexpr std::size_t m = 5, n = 50, trials = 10000;
  std::vector<std::size_t> kept(n, 0);
  Rng rng(2);
  for (std::size_t t = 0; t < trials; ++t) {
    EpisodicMemory mem(MemoryPolicy::reservoir, m);
    for (std::size_t i = 0; i < n; ++i) mem.insert(entry(static_cast<int>(i)), rng);
    ASSERT_EQ(mem.size(), m);
    for (const auto* e : mem.entries()) ++kept[static_cast<std::size_t>(e->label)];
  }
  const double p = double(m) / n, mean = trials * p, sigma = std::sqrt(trials * p * (1 - p));
  // 4 sigma per item keeps the family-wise false alarm rate near 0.3% over 50 items.
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(double(kept[i]), mean, 4 * sigma) << "item " << i;
}

TEST(ReservoirMemory, StreamShorterThanCapacityKeepsAll) {
  EpisodicMemory m(MemoryPolicy::reservoir, 100);
  Rng rng(3);
  for (int i = 0; i < 40; ++i) m.insert(entry(i), rng);
  EXPECT_EQ(m.size(), 40u);
}

TEST(ReservoirMemory, ReturnedSlotHoldsTheEntry) {
  EpisodicMemory m(MemoryPolicy::reservoir, 4);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto slot = m.insert(entry(i), rng);
    if (slot) {
      EXPECT_EQ(m.slot(*slot).label, i);
    }
  }
}

TEST(MemorySample, UnderfullReturnsAllWithoutDuplicates) {
  EpisodicMemory m(MemoryPolicy::reservoir, 10);
  Rng rng(5);
  for (int i = 0; i < 6; ++i) m.insert(entry(i), rng);
  const auto s = m.sample(10, rng);
  std::set<int> seen;
  for (const auto& e : s) seen.insert(e.label);
  EXPECT_EQ(s.size(), 6u);
  EXPECT_EQ(seen.size(), 6u);
}

TEST(MemorySample, NoDuplicatesWithinABatch) {
  EpisodicMemory m(MemoryPolicy::reservoir, 20);
  Rng rng(6);
  for (int i = 0; i < 20; ++i) m.insert(entry(i), rng);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<int> seen;
    for (const auto& e : m.sample(7, rng)) seen.insert(e.label);
    EXPECT_EQ(seen.size(), 7u);
  }
}

TEST(MemorySample, UniformOverEntries) {
  EpisodicMemory m(MemoryPolicy::reservoir, 10);
  Rng rng(7);
  for (int i = 0; i < 10; ++i) m.insert(entry(i), rng);
  constexpr std::size_t draws = 20000;
  std::vector<std::size_t> hits(10, 0);
  for (std::size_t d = 0; d < draws; ++d) ++hits[static_cast<std::size_t>(m.sample(1, rng).front().label)];
  const double sigma = std::sqrt(draws * 0.1 * 0.9);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(double(hits[i]), 2000.0, 4 * sigma) << "entry " << i;
}

TEST(MemorySample, BeforeTaskFiltersRingSegments) {
  EpisodicMemory m(MemoryPolicy::ring, 5);
  Rng rng(8);
  for (std::size_t t = 0; t < 3; ++t)
    for (int i = 0; i < 5; ++i) m.insert(entry(static_cast<int>(t), t), rng);
  for (const auto& e : m.sample(100, rng, 2)) EXPECT_LT(*e.task_id, 2u);
  EXPECT_EQ(m.sample(100, rng, 2).size(), 10u);
  EXPECT_TRUE(m.sample(4, rng, 0).empty());
}

TEST(MemorySample, EmptyMemoryGivesEmptyBatch) {
  EpisodicMemory m(MemoryPolicy::reservoir, 4);
  Rng rng(9);
  EXPECT_TRUE(m.sample(3, rng).empty());
  EXPECT_TRUE(stack_inputs({}).empty());
}

TEST(MemoryBudget, RingHoldsCapacityPerTask) {
  EpisodicMemory m(MemoryPolicy::ring, 50);
  Rng rng(10);
  for (std::size_t t = 0; t < 5; ++t)
    for (int i = 0; i < 400; ++i) m.insert(entry(i, t, {1, 16, 16}), rng);
  EXPECT_EQ(m.size(), 250u);
  EXPECT_EQ(m.stored_scalars(), 250u * (256 + 2));
}

TEST(MemoryBudget, ReservoirNeverExceedsCapacity) {
  EpisodicMemory m(MemoryPolicy::reservoir, 30);
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    auto e = entry(i % 10, std::size_t(i / 200), {1, 4, 4});
    e.soft_logits = std::vector<Scalar>(3, 0);
    m.insert(std::move(e), rng);
    ASSERT_LE(m.size(), 30u);
  }
  EXPECT_EQ(m.stored_scalars(), 30u * (16 + 3 + 2));
}

TEST(StackInputs, PreservesOrder) {
  const auto x = stack_inputs({entry(3), entry(5)});
  ASSERT_EQ(x.shape(), (Shape{2, 1, 2, 2}));
  EXPECT_EQ(x[0], 3);
  EXPECT_EQ(x[4], 5);
  EXPECT_THROW(stack_inputs({entry(1), entry(2, std::nullopt, {1, 3, 3})}), ShapeError);
}

class SnapshotTest : public ::testing::Test {
 protected:
  DualNetModel model{detail::tiny_arch(true), true, true, 21};
  EpisodicMemory memory{MemoryPolicy::ring, 4};
  Rng rng{12};

  void SetUp() override {
    model.add_task(0, {4, 9});
    for (int i = 0; i < 4; ++i) {
      MemoryEntry e;
      e.input = detail::random_tensor({2, 8, 8}, rng, 0, 1);
      e.label = i % 2 ? 9 : 4;
      e.task_id = 0;
      memory.insert(std::move(e), rng);
    }
  }

  Scalar max_kl_to_snapshot() {
    Scalar worst = 0;
    for (const auto* e : memory.entries()) {
      const Tensor current = model.predict(e->input.reshaped({1, 2, 8, 8}), 0);
      const Tensor stored({1, e->soft_logits->size()}, *e->soft_logits);
      worst = std::max(worst, kl_divergence(current, stored, 2).loss);
    }
    return worst;
  }
};

TEST_F(SnapshotTest, StoresCurrentLogitsOfTheTaskHead) {
  ASSERT_TRUE(snapshot_soft_labels(memory, model, 0));
  for (const auto* e : memory.entries()) {
    ASSERT_TRUE(e->soft_logits);
    EXPECT_EQ(e->soft_logits->size(), 2u);
  }
  EXPECT_LT(max_kl_to_snapshot(), 1e-12);
}

TEST_F(SnapshotTest, ResnapshotFollowsWeightChanges) {
  snapshot_soft_labels(memory, model, 0);
  const auto before = *memory.entries().front()->soft_logits;
  for (auto* p : model.head_parameters())
    for (auto& v : p->value.values()) v += Scalar(0.5);
  for (auto* p : model.slow_parameters())
    for (auto& v : p->value.values()) v *= Scalar(1.3);
  EXPECT_GT(max_kl_to_snapshot(), 0);
  snapshot_soft_labels(memory, model, 0);
  EXPECT_NE(*memory.entries().front()->soft_logits, before);
  EXPECT_LT(max_kl_to_snapshot(), 1e-12);
}

TEST_F(SnapshotTest, OtherTasksUntouched) {
  model.add_task(1, {1, 2, 3});
  MemoryEntry e;
  e.input = detail::random_tensor({2, 8, 8}, rng, 0, 1);
  e.label = 2;
  e.task_id = 1;
  memory.insert(std::move(e), rng);
  snapshot_soft_labels(memory, model, 0);
  EXPECT_FALSE(memory.entries().back()->soft_logits);
  snapshot_soft_labels(memory, model, 1);
  EXPECT_EQ(memory.entries().back()->soft_logits->size(), 3u);
}

TEST(Snapshot, TaskFreeIsANoOp) {
  DualNetModel model(detail::tiny_arch(true), true, false, 3);
  const std::vector<int> labels{0, 1};
  model.observe_labels(labels);
  EpisodicMemory memory(MemoryPolicy::reservoir, 2);
  Rng rng(13);
  auto e = entry(0, 0, {2, 8, 8});
  memory.insert(std::move(e), rng);
  testing::internal::CaptureStderr();
  EXPECT_FALSE(snapshot_soft_labels(memory, model, 0));
  EXPECT_NE(testing::internal::GetCapturedStderr().find("no-op"), std::string::npos);
  EXPECT_FALSE(memory.entries().front()->soft_logits);
}
