#include "emformer/layout.hpp"

#include <algorithm>

#include "emformer/error.hpp"
#include "emformer/numerics.hpp"

namespace emformer {

std::size_t SegmentLayout::horizon(std::size_t segment) const {
  const auto& s = segments.at(segment);
  return s.center.end - 1 + s.right_copy.size();
}

std::size_t SegmentLayout::segment_of(std::size_t frame) const {
  if (frame >= total_frames) throw ShapeError("segment_of: frame out of range");
  auto it = std::upper_bound(segments.begin(), segments.end(), frame,
                             [](std::size_t f, const Segment& s) { return f < s.center.end; });
  return static_cast<std::size_t>(it - segments.begin());
}

SegmentLayout segment_utterance(std::size_t total_frames, const ModelConfig& cfg) {
  if (total_frames == 0) throw EmptyInputError("segment_utterance: utterance has no frames");
  if (cfg.center_frames == 0) throw ConfigError("segment_utterance: center_frames must be at least 1");
  SegmentLayout layout;
  layout.total_frames = total_frames;
  const std::size_t c = cfg.center_frames;
  std::size_t hardcopy = 0;
  for (std::size_t start = 0; start < total_frames; start += c) {
    const std::size_t end = std::min(start + c, total_frames);
    const std::size_t rc_len = std::min(cfg.right_frames, total_frames - end);
    layout.segments.push_back({{start, end}, {hardcopy, hardcopy + rc_len}});
    hardcopy += rc_len;
  }
  layout.hardcopy_total = hardcopy;
  return layout;
}

BoolMask SegmentKeys::local_mask(bool include_memory) const {
  const std::size_t n_mem = include_memory ? memory.size() : 0;
  const std::size_t n_keys = n_mem + left.size() + center.size() + right.size();
  BoolMask mask(query_count(), n_keys, true);
  if (summary) {
    const std::size_t row = query_count() - 1;
    for (std::size_t k = 0; k < n_mem; ++k) mask.set(row, k, false);
  }
  return mask;
}

AttentionMaskSet build_masks(const SegmentLayout& layout, const ModelConfig& cfg) {
  AttentionMaskSet set;
  set.has_memory = cfg.has_memory();
  set.segments.reserve(layout.n_segments());
  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const auto& seg = layout.segments[i];
    SegmentKeys keys;
    if (set.has_memory) {
      keys.memory = {i > cfg.memory_size ? i - cfg.memory_size : 0, i};
      keys.summary = true;
    }
    const std::size_t start = seg.center.begin;
    keys.left = {start - std::min(cfg.left_frames, start), start};
    keys.center = seg.center;
    keys.right = seg.right_copy;
    set.segments.push_back(keys);
  }
  return set;
}

BoolMask AttentionMaskSet::dense(const SegmentLayout& layout) const {
  const std::size_t n_seg = layout.n_segments();
  const std::size_t n_summary = has_memory ? n_seg : 0;
  const std::size_t n_mem = has_memory ? n_seg : 0;
  const std::size_t hc = layout.hardcopy_total;
  const std::size_t t = layout.total_frames;
  BoolMask mask(hc + t + n_summary, n_mem + hc + t, false);

  const auto key_mem = [&](std::size_t slot) { return slot; };
  const auto key_rc = [&](std::size_t r) { return n_mem + r; };
  const auto key_center = [&](std::size_t f) { return n_mem + hc + f; };

  for (std::size_t i = 0; i < n_seg; ++i) {
    const auto& k = segments[i];
    auto allow_row = [&](std::size_t row, bool with_memory) {
      if (with_memory) {
        for (std::size_t s = k.memory.begin; s < k.memory.end; ++s) mask.set(row, key_mem(s), true);
      }
      for (std::size_t f = k.left.begin; f < k.left.end; ++f) mask.set(row, key_center(f), true);
      for (std::size_t f = k.center.begin; f < k.center.end; ++f) mask.set(row, key_center(f), true);
      for (std::size_t r = k.right.begin; r < k.right.end; ++r) mask.set(row, key_rc(r), true);
    };
    for (std::size_t r = k.right.begin; r < k.right.end; ++r) allow_row(r, true);
    for (std::size_t f = k.center.begin; f < k.center.end; ++f) allow_row(hc + f, true);
    if (k.summary) allow_row(hc + t + i, false);
  }
  return mask;
}

template <typename Real>
Matrix<Real> gather_right_copies(const Matrix<Real>& frames, const SegmentLayout& layout) {
  if (frames.rows() != layout.total_frames) throw ShapeError("gather_right_copies: frame count mismatch");
  Matrix<Real> out(layout.hardcopy_total, frames.cols());
  for (const auto& seg : layout.segments) {
    const Range src = seg.right_source();
    for (std::size_t k = 0; k < src.size(); ++k) {
      auto from = frames.row(src.begin + k);
      std::copy(from.begin(), from.end(), out.row(seg.right_copy.begin + k).begin());
    }
  }
  return out;
}

template <typename Real>
Matrix<Real> segment_means(const Matrix<Real>& centers, const SegmentLayout& layout) {
  Matrix<Real> out(layout.n_segments(), centers.cols());
  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const auto& c = layout.segments[i].center;
    out.set_rows_at(i, row_mean(centers, c.begin, c.end));
  }
  return out;
}

template Matrix<float> gather_right_copies(const Matrix<float>&, const SegmentLayout&);
template Matrix<double> gather_right_copies(const Matrix<double>&, const SegmentLayout&);
template Matrix<float> segment_means(const Matrix<float>&, const SegmentLayout&);
template Matrix<double> segment_means(const Matrix<double>&, const SegmentLayout&);

}  // namespace emformer
