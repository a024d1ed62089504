#include <gtest/gtest.h>

#include <bit>
#include <random>

#include "emformer/error.hpp"
#include "emformer/layout.hpp"
#include "../support/reference.hpp"

namespace emformer {
namespace {

using testref::tiny_config;

TEST(Segmentation, SplitsIntoCenterBlocksWithClampedLookAhead) {
  const auto layout = segment_utterance(10, tiny_config(1, 8, 0, 4, 2, 0));
  ASSERT_EQ(layout.n_segments(), 3u);
  EXPECT_EQ(layout.segments[0].center, (Range{0, 4}));
  EXPECT_EQ(layout.segments[1].center, (Range{4, 8}));
  EXPECT_EQ(layout.segments[2].center, (Range{8, 10}));
  EXPECT_EQ(layout.segments[0].right_copy, (Range{0, 2}));
  EXPECT_EQ(layout.segments[1].right_copy, (Range{2, 4}));
  EXPECT_TRUE(layout.segments[2].right_copy.empty());
  EXPECT_EQ(layout.segments[1].right_source(), (Range{8, 10}));
  EXPECT_EQ(layout.hardcopy_total, 4u);
}

TEST(Segmentation, ShortUtteranceIsOneSegment) {
  const auto layout = segment_utterance(3, tiny_config(1, 8, 2, 8, 2, 1));
  ASSERT_EQ(layout.n_segments(), 1u);
  EXPECT_EQ(layout.segments[0].center, (Range{0, 3}));
  EXPECT_EQ(layout.hardcopy_total, 0u);
  EXPECT_EQ(layout.horizon(0), 2u);
}

TEST(Segmentation, LookAheadLongerThanNextBlockIsClampedToUtterance) {
  // R > C: segment 0 looks 3 frames ahead, spanning two later blocks.
  const auto layout = segment_utterance(5, tiny_config(1, 8, 0, 1, 3, 0));
  EXPECT_EQ(layout.segments[0].right_copy.size(), 3u);
  EXPECT_EQ(layout.segments[2].right_copy.size(), 2u);
  EXPECT_EQ(layout.segments[4].right_copy.size(), 0u);
  EXPECT_EQ(layout.horizon(0), 3u);
  EXPECT_EQ(layout.horizon(3), 4u);
}

TEST(Segmentation, EmptyUtteranceThrows) {
  EXPECT_THROW(segment_utterance(0, tiny_config(1, 8, 0, 2, 1, 0)), EmptyInputError);
}

TEST(Segmentation, HorizonAndOwnership) {
  const auto layout = segment_utterance(11, tiny_config(1, 8, 0, 3, 2, 0));
  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const auto& s = layout.segments[i];
    EXPECT_EQ(layout.horizon(i), std::min<std::size_t>((i + 1) * 3 - 1 + s.right_copy.size(), 10));
    for (std::size_t t = s.center.begin; t < s.center.end; ++t) EXPECT_EQ(layout.segment_of(t), i);
  }
  EXPECT_THROW(layout.segment_of(11), ShapeError);
}

TEST(Masks, KeyRangesPerSegment) {
  const auto cfg = tiny_config(1, 8, 3, 2, 1, 2);
  const auto layout = segment_utterance(9, cfg);
  const auto masks = build_masks(layout, cfg);
  ASSERT_EQ(masks.segments.size(), 5u);
  EXPECT_TRUE(masks.has_memory);
  const auto& k3 = masks.segments[3];
  EXPECT_EQ(k3.memory, (Range{1, 3}));
  EXPECT_EQ(k3.left, (Range{3, 6}));
  EXPECT_EQ(k3.center, (Range{6, 8}));
  EXPECT_EQ(k3.right, layout.segments[3].right_copy);
  EXPECT_TRUE(k3.summary);
  const auto& k0 = masks.segments[0];
  EXPECT_TRUE(k0.memory.empty());
  EXPECT_TRUE(k0.left.empty());
}

TEST(Masks, SummaryQuerySeesNoMemoryKey) {
  const auto cfg = tiny_config(1, 8, 1, 2, 1, 3);
  const auto layout = segment_utterance(12, cfg);
  const auto masks = build_masks(layout, cfg);
  const auto& k = masks.segments[4];
  const BoolMask local = k.local_mask();
  ASSERT_EQ(local.rows(), k.query_count());
  ASSERT_EQ(local.cols(), k.key_count());
  for (std::size_t q = 0; q + 1 < local.rows(); ++q) EXPECT_EQ(local.allowed_in_row(q), k.key_count());
  for (std::size_t j = 0; j < k.memory.size(); ++j) EXPECT_FALSE(local(local.rows() - 1, j));
  EXPECT_EQ(local.allowed_in_row(local.rows() - 1), k.key_count() - k.memory.size());

  const BoolMask dense = masks.dense(layout);
  const std::size_t summary_row = layout.hardcopy_total + layout.total_frames + 4;
  for (std::size_t j = 0; j < layout.n_segments(); ++j) EXPECT_FALSE(dense(summary_row, j));
}

TEST(Masks, NoMemoryMeansNoSummary) {
  const auto cfg = tiny_config(1, 8, 1, 2, 1, 0);
  const auto layout = segment_utterance(7, cfg);
  const auto masks = build_masks(layout, cfg);
  EXPECT_FALSE(masks.has_memory);
  const auto dense = masks.dense(layout);
  EXPECT_EQ(dense.rows(), layout.hardcopy_total + 7);
  EXPECT_EQ(dense.cols(), layout.hardcopy_total + 7);
}

// Transitive closure over the dense mask: which original frames can each
// center output depend on after n layers? Frames are bits of a uint64.
struct Closure {
  std::vector<std::uint64_t> right, centers, memory;
};

std::uint64_t frames_bits(Range r) {
  std::uint64_t b = 0;
  for (std::size_t f = r.begin; f < r.end; ++f) b |= std::uint64_t{1} << f;
  return b;
}

Closure closure_after(const SegmentLayout& layout, const AttentionMaskSet& masks, std::size_t layers) {
  const std::size_t hc = layout.hardcopy_total, t = layout.total_frames, ns = layout.n_segments();
  const std::size_t n_mem = masks.has_memory ? ns : 0;
  const BoolMask dense = masks.dense(layout);
  Closure c;
  c.right.resize(hc);
  c.centers.resize(t);
  for (const auto& s : layout.segments) {
    for (std::size_t k = 0; k < s.right_copy.size(); ++k) c.right[s.right_copy.begin + k] = std::uint64_t{1} << (s.center.end + k);
    c.memory.push_back(frames_bits(s.center));
  }
  for (std::size_t f = 0; f < t; ++f) c.centers[f] = std::uint64_t{1} << f;
  if (!masks.has_memory) c.memory.clear();

  for (std::size_t n = 0; n < layers; ++n) {
    auto key_dep = [&](std::size_t col) {
      if (col < n_mem) return c.memory[col];
      if (col < n_mem + hc) return c.right[col - n_mem];
      return c.centers[col - n_mem - hc];
    };
    auto row_dep = [&](std::size_t row, std::uint64_t self) {
      for (std::size_t col = 0; col < dense.cols(); ++col) {
        if (dense(row, col)) self |= key_dep(col);
      }
      return self;
    };
    Closure next = c;
    for (std::size_t h = 0; h < hc; ++h) next.right[h] = row_dep(h, c.right[h]);
    for (std::size_t f = 0; f < t; ++f) next.centers[f] = row_dep(hc + f, c.centers[f]);
    for (std::size_t i = 0; i < n_mem; ++i) {
      std::uint64_t self = 0;
      for (std::size_t f = layout.segments[i].center.begin; f < layout.segments[i].center.end; ++f) self |= c.centers[f];
      next.memory[i] = row_dep(hc + t + i, self);
    }
    c = std::move(next);
  }
  return c;
}

std::size_t highest_frame(std::uint64_t bits) { return 63 - static_cast<std::size_t>(std::countl_zero(bits)); }

TEST(Masks, HorizonHoldsOverAnyNumberOfLayers) {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto gc = testref::draw_grid_case(gen, DType::F64);
    const auto layout = segment_utterance(gc.frames, gc.cfg);
    const auto masks = build_masks(layout, gc.cfg);
    const auto c = closure_after(layout, masks, 6);
    for (std::size_t f = 0; f < gc.frames; ++f) {
      const std::size_t seg = layout.segment_of(f);
      ASSERT_LE(highest_frame(c.centers[f]), layout.horizon(seg))
          << "trial " << trial << " frame " << f << " L=" << gc.cfg.left_frames << " C=" << gc.cfg.center_frames
          << " R=" << gc.cfg.right_frames << " M=" << gc.cfg.memory_size;
    }
    // The bound is attained: the last center frame of a segment sees its
    // whole look-ahead after one layer.
    const auto one = closure_after(layout, masks, 1);
    for (std::size_t i = 0; i < layout.n_segments(); ++i) {
      EXPECT_EQ(highest_frame(one.centers[layout.segments[i].center.end - 1]), layout.horizon(i));
    }
  }
}

TEST(Masks, WithoutHardCopiesTheLookAheadLeaksAcrossLayers) {
  // Contrast case: if right-context keys were the next segment's own
  // center rows, two layers would already reach past the horizon.
  const auto cfg = tiny_config(2, 8, 2, 2, 1, 0);
  const auto layout = segment_utterance(8, cfg);
  std::vector<std::uint64_t> dep(8);
  for (std::size_t f = 0; f < 8; ++f) dep[f] = std::uint64_t{1} << f;
  for (int layer = 0; layer < 2; ++layer) {
    std::vector<std::uint64_t> next = dep;
    for (std::size_t f = 0; f < 8; ++f) {
      const auto& s = layout.segments[layout.segment_of(f)];
      const std::size_t lo = s.center.begin >= 2 ? s.center.begin - 2 : 0;
      for (std::size_t g = lo; g < s.center.end + s.right_copy.size(); ++g) next[f] |= dep[g];
    }
    dep = next;
  }
  EXPECT_GT(highest_frame(dep[0]), layout.horizon(0));
}

TEST(Layout, GatherRightCopiesAndSegmentMeans) {
  const auto cfg = tiny_config(1, 2, 0, 2, 1, 1);
  const Matrix<double> frames{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
  const auto layout = segment_utterance(5, cfg);
  const auto rc = gather_right_copies(frames, layout);
  const Matrix<double> expect_rc{{4, 5}, {8, 9}};
  EXPECT_TRUE(bitwise_equal(rc, expect_rc));
  const auto means = segment_means(frames, layout);
  const Matrix<double> expect_means{{1, 2}, {5, 6}, {8, 9}};
  EXPECT_TRUE(bitwise_equal(means, expect_means));
}

}  // namespace
}  // namespace emformer
