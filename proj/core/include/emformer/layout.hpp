#pragma once

#include <cstddef>
#include <vector>

#include "emformer/config.hpp"
#include "emformer/matrix.hpp"

namespace emformer {

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Range&) const = default;
};

struct Segment {
  Range center;      // into the T center frames
  Range right_copy;  // into the hard-copy region
  // Original frames duplicated into right_copy.
  Range right_source() const { return {center.end, center.end + right_copy.size()}; }
};

// Partition of an utterance into center blocks plus the hard-copied
// look-ahead region. Right copies of segment i duplicate the first frames
// of segment i+1's center block.
struct SegmentLayout {
  std::size_t total_frames = 0;
  std::vector<Segment> segments;
  std::size_t hardcopy_total = 0;

  std::size_t n_segments() const { return segments.size(); }
  // Last original frame index segment i may see, i.e. (i+1)C - 1 + rc_len_i
  // clamped to the utterance.
  std::size_t horizon(std::size_t segment) const;
  // Segment that owns center frame t.
  std::size_t segment_of(std::size_t frame) const;
};

// Throws EmptyInputError when total_frames is 0.
SegmentLayout segment_utterance(std::size_t total_frames, const ModelConfig& cfg);

// Keys visible to one segment's queries, as index ranges into the per-layer
// key sources. Local key order is [memory, left, center, right]; local query
// order is [center, right, summary].
struct SegmentKeys {
  Range memory;  // memory slots (segment indices of the layer below)
  Range left;    // center-frame indices preceding the segment
  Range center;
  Range right;   // hard-copy indices
  bool summary = false;

  std::size_t key_count() const { return memory.size() + left.size() + center.size() + right.size(); }
  std::size_t query_count() const { return center.size() + right.size() + (summary ? 1 : 0); }

  // Every query sees every key except the summary query, which sees no
  // memory slot. include_memory=false drops the memory keys altogether.
  BoolMask local_mask(bool include_memory = true) const;
};

struct AttentionMaskSet {
  std::vector<SegmentKeys> segments;
  bool has_memory = false;

  // Whole-utterance mask. Query order: [right copies, centers, summaries];
  // key order: [memory slots, right copies, centers]. Summary/memory blocks
  // are present only when has_memory.
  BoolMask dense(const SegmentLayout& layout) const;
};

AttentionMaskSet build_masks(const SegmentLayout& layout, const ModelConfig& cfg);

// Copies of the hard-copy rows, gathered from the original frames.
template <typename Real>
Matrix<Real> gather_right_copies(const Matrix<Real>& frames, const SegmentLayout& layout);

// Per-segment means of center blocks, one row per segment.
template <typename Real>
Matrix<Real> segment_means(const Matrix<Real>& centers, const SegmentLayout& layout);

}  // namespace emformer
