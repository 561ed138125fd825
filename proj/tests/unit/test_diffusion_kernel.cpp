#include <gtest/gtest.h>

#include <random>

#include "dsrd/diffusion_kernel.hpp"

using namespace dsrd;

namespace {

EventStream chain(double t_ab, double t_bc) {
  return EventStream::from_events({{0, 1, t_ab, {}, kNoLabel, 0}, {1, 2, t_bc, {}, kNoLabel, 0}}, 3);
}

EventStream random_stream(std::mt19937_64& rng, NodeId nodes, int events, int ticks) {
  std::uniform_int_distribution<NodeId> node(0, nodes - 1);
  std::uniform_int_distribution<int> tick(1, ticks);
  std::vector<Event> ev;
  for (int i = 0; i < events; ++i) ev.push_back({node(rng), node(rng), double(tick(rng)), {}, kNoLabel, 0});
  return EventStream::from_events(ev, nodes);
}

}  // namespace

TEST(Kernel, BaseCaseIsTransition) {
  const auto s = EventStream::from_events({{0, 1, 1.0, {}, kNoLabel, 0}}, 2);
  const auto k = iterate_kernel(s, 1.0, 1);
  EXPECT_EQ(k.A[1](0, 1), 1.0);
  EXPECT_EQ(k.A[1].sum(), 1.0);
}

TEST(Kernel, ChainOrderMatters) {
  EXPECT_EQ(iterate_kernel(chain(1, 2), 2.0, 2).A[2](0, 2), 1.0);
  EXPECT_EQ(iterate_kernel(chain(2, 1), 2.0, 2).A[2](0, 2), 0.0);
}

TEST(Kernel, RejectsStaleTimestamp) {
  WalkKernel k(2, 1);
  kernel_update(k, {1.0, RowMatrix<double>::Zero(2, 2)});
  EXPECT_THROW(kernel_update(k, {1.0, RowMatrix<double>::Zero(2, 2)}), Error);
  EXPECT_THROW(kernel_update(k, {2.0, RowMatrix<double>::Zero(3, 3)}), Error);
}

TEST(ClosedForm, SingleTimestampDepthTwoIsZero) {
  const auto s = EventStream::from_events({{0, 1, 1.0, {}, kNoLabel, 0}, {1, 2, 1.0, {}, kNoLabel, 0}}, 3);
  EXPECT_TRUE(closed_form_kernel(s, 1.0, 2).isZero());
}

TEST(ClosedForm, DepthOneIsSumOfTransitions) {
  std::mt19937_64 rng(3);
  const auto s = random_stream(rng, 5, 12, 6);
  RowMatrix<double> sum = RowMatrix<double>::Zero(5, 5);
  for (const auto& tr : transitions(s, 1e9)) sum += tr.T;
  EXPECT_EQ(closed_form_kernel(s, 1e9, 1), sum);
}

TEST(ClosedForm, MatchesIterationExactly) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_stream(rng, 5, 14, 8);
    const auto k = iterate_kernel(s, 8.0, 3);
    for (int l = 1; l <= 3; ++l) EXPECT_EQ(closed_form_kernel(s, 8.0, l), k.A[static_cast<std::size_t>(l)]);
  }
}

TEST(Walks, ChainCounts) {
  const auto s = chain(1, 2);
  EXPECT_EQ(enumerate_walks(s, 2.0, 2, 0, 2), 1u);
  EXPECT_EQ(enumerate_walks(s, 2.0, 1, 0, 2), 0u);
}

TEST(Walks, DuplicateEdgeDoublesCount) {
  const auto s = EventStream::from_events(
      {{0, 1, 1.0, {}, kNoLabel, 0}, {0, 1, 1.0, {}, kNoLabel, 0}, {1, 2, 2.0, {}, kNoLabel, 0}}, 3);
  EXPECT_EQ(enumerate_walks(s, 2.0, 2, 0, 2), 2u);
  EXPECT_EQ(iterate_kernel(s, 2.0, 2).A[2](0, 2), 2.0);
}

TEST(Walks, SymmetricLinksAgreeWithKernel) {
  std::mt19937_64 rng(17);
  TransitionOptions sym;
  sym.symmetric = true;
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = random_stream(rng, 4, 8, 5);
    const auto k = iterate_kernel(s, 5.0, 3, sym);
    for (int l = 1; l <= 3; ++l)
      for (NodeId i = 0; i < 4; ++i)
        for (NodeId j = 0; j < 4; ++j)
          EXPECT_EQ(k.A[static_cast<std::size_t>(l)](i, j), double(enumerate_walks(s, 5.0, l, i, j, true)));
  }
}

TEST(Walks, GuardOnLongStreams) {
  std::mt19937_64 rng(1);
  const auto s = random_stream(rng, 4, 30, 30);
  EXPECT_THROW(enumerate_walks(s, 1e9, 2, 0, 1), Error);
}
