#include <gtest/gtest.h>

#include <set>

#include "siblurry/error.hpp"
#include "siblurry/replay.hpp"
#include "support.hpp"

namespace siblurry {
namespace {

std::vector<ReplayItem> items(std::size_t n, SampleId first = 0) {
  std::vector<ReplayItem> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({first + i, static_cast<ClassId>(i % 7)});
  return out;
}

TEST(Reservoir, FillPhaseKeepsFirstItems) {
  Rng rng(1);
  ReplayBuffer b(3);
  const auto stream = items(3);
  for (const auto& it : stream) reservoir_update(b, it, rng);
  EXPECT_EQ(b.items, stream);
  EXPECT_EQ(b.seen, 3u);
}

TEST(Reservoir, ZeroCapacityStoresNothing) {
  Rng rng(1);
  ReplayBuffer b(0);
  for (const auto& it : items(50)) reservoir_update(b, it, rng);
  EXPECT_TRUE(b.items.empty());
  EXPECT_EQ(b.seen, 50u);
}

TEST(Reservoir, SizeInvariantAndNoFutureItems) {
  Rng rng(5);
  ReplayBuffer b(10);
  const auto stream = items(200);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    reservoir_update(b, stream[i], rng);
    EXPECT_EQ(b.items.size(), std::min<std::size_t>(i + 1, 10));
    for (const auto& it : b.items) EXPECT_LE(it.sample_id, stream[i].sample_id);
  }
}

TEST(Reservoir, UniformInclusion) {
  constexpr int kTrials = 20000;
  constexpr std::size_t kItems = 100;
  const auto stream = items(kItems);
  std::vector<double> hits(kItems, 0.0);
  Rng root(77);
  for (int t = 0; t < kTrials; ++t) {
    Rng rng = root.split(static_cast<std::uint64_t>(t));
    ReplayBuffer b(2);
    for (const auto& it : stream) reservoir_update(b, it, rng);
    for (const auto& it : b.items) hits[it.sample_id] += 1.0;
  }
  const double p = 2.0 / kItems;
  const double sigma = std::sqrt(p * (1.0 - p) / kTrials);
  const double expected = p * kTrials;
  double chi2 = 0.0;
  for (double h : hits) {
    EXPECT_LE(std::abs(h / kTrials - p), 3.0 * sigma);
    chi2 += (h - expected) * (h - expected) / expected;
  }
  EXPECT_GT(test::chi_square_sf(chi2, kItems - 1), 0.01);
}

TEST(ComposeBatch, Sizes) {
  Rng rng(3);
  const auto stream = items(16, 1000);
  ReplayBuffer empty(10);
  EXPECT_EQ(compose_batch(stream, empty, rng), stream);

  ReplayBuffer full(40);
  for (const auto& it : items(40)) reservoir_update(full, it, rng);
  const auto out = compose_batch(stream, full, rng);
  ASSERT_EQ(out.size(), 32u);
  EXPECT_TRUE(std::equal(stream.begin(), stream.end(), out.begin()));
  std::set<SampleId> drawn;
  for (std::size_t i = 16; i < 32; ++i) {
    EXPECT_LT(out[i].sample_id, 40u);
    drawn.insert(out[i].sample_id);
  }
  EXPECT_EQ(drawn.size(), 16u);  // without replacement

  ReplayBuffer small(5);
  for (const auto& it : items(5)) reservoir_update(small, it, rng);
  EXPECT_EQ(compose_batch(stream, small, rng).size(), 21u);
}

TEST(ReplayDump, RoundTrip) {
  test::TempDir dir;
  Rng rng(9);
  ReplayBuffer b(8);
  for (const auto& it : items(30)) reservoir_update(b, it, rng);
  dump_buffer(b, dir / "buffer.jsonl");
  EXPECT_EQ(load_buffer(dir / "buffer.jsonl"), b);
  EXPECT_THROW(load_buffer(dir / "absent.jsonl"), LoadError);
}

}  // namespace
}  // namespace siblurry
