#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "emformer/config.hpp"
#include "emformer/layout.hpp"
#include "emformer/matrix.hpp"
#include "emformer/numerics.hpp"
#include "emformer/ring.hpp"

namespace emformer {

// Parameters of one layer. Projections act on row vectors (x * W).
template <typename Real>
struct LayerWeights {
  Matrix<Real> w_q, w_k, w_v, w_out;  // d x d
  Matrix<Real> w1;                    // d x f
  std::vector<Real> b1;               // f
  Matrix<Real> w2;                    // f x d
  std::vector<Real> b2;               // d
  std::vector<Real> ln_attn_gain, ln_attn_bias;
  std::vector<Real> ln_ffn_gain, ln_ffn_bias;
  std::vector<Real> ln_out_gain, ln_out_bias;

  // All tensors zero, gains included. Used as a gradient accumulator.
  static LayerWeights zeros(std::size_t d_model, std::size_t ffn_dim);

  // Visits (name, values) for every tensor in a fixed order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(std::string_view("w_q"), w_q.data());
    fn(std::string_view("w_k"), w_k.data());
    fn(std::string_view("w_v"), w_v.data());
    fn(std::string_view("w_out"), w_out.data());
    fn(std::string_view("w1"), w1.data());
    fn(std::string_view("b1"), std::span<Real>(b1));
    fn(std::string_view("w2"), w2.data());
    fn(std::string_view("b2"), std::span<Real>(b2));
    fn(std::string_view("ln_attn_gain"), std::span<Real>(ln_attn_gain));
    fn(std::string_view("ln_attn_bias"), std::span<Real>(ln_attn_bias));
    fn(std::string_view("ln_ffn_gain"), std::span<Real>(ln_ffn_gain));
    fn(std::string_view("ln_ffn_bias"), std::span<Real>(ln_ffn_bias));
    fn(std::string_view("ln_out_gain"), std::span<Real>(ln_out_gain));
    fn(std::string_view("ln_out_bias"), std::span<Real>(ln_out_bias));
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<LayerWeights*>(this)->for_each_tensor(
        [&](std::string_view name, std::span<Real> v) { fn(name, std::span<const Real>(v)); });
  }

  std::size_t parameter_count() const;

  // Shapes against cfg and finiteness. Throws ShapeError.
  void check(const ModelConfig& cfg) const;

  LayerWeights& operator+=(const LayerWeights& other);
};

// Attention probabilities of one segment, as seen by one layer kernel.
template <typename Real>
struct SegmentProbe {
  std::size_t segment = 0;
  std::size_t memory_keys = 0;  // leading keys that are memory-bank slots
  bool has_summary = false;     // the last query row is the summary query
  AttentionProbs<Real> probs;
};

// Mean of the (layer-normed) center rows.
template <typename Real>
Matrix<Real> summary_vector(const Matrix<Real>& centers_normed);

// ---------------------------------------------------------------------------
// Parallel (training-mode) Emformer layer over a whole utterance.

template <typename Real>
struct ParallelLayerOutput {
  Matrix<Real> centers;       // T x d
  Matrix<Real> right_copies;  // hardcopy_total x d
  Matrix<Real> memory;        // one row per segment; empty without a memory bank
};

template <typename Real>
struct ParallelLayerTrace {
  Matrix<Real> center_keys;    // W_k applied to the normed center inputs
  Matrix<Real> center_values;
  std::vector<SegmentProbe<Real>> probes;
};

// memory holds one row per segment (vectors produced below); segment i sees
// the rows in masks.segments[i].memory. nullptr means this layer has no
// memory keys; the summary query still exists whenever cfg has a bank.
template <typename Real>
ParallelLayerOutput<Real> emformer_layer_parallel(const Matrix<Real>& centers, const Matrix<Real>& right_copies,
                                                  const Matrix<Real>* memory, const LayerWeights<Real>& w,
                                                  const SegmentLayout& layout, const AttentionMaskSet& masks,
                                                  const ModelConfig& cfg,
                                                  ParallelLayerTrace<Real>* trace = nullptr);

template <typename Real>
struct ParallelLayerGrads {
  Matrix<Real> centers;
  Matrix<Real> right_copies;
  Matrix<Real> memory;  // empty when the layer had no memory input
  LayerWeights<Real> weights;
};

// Reverse mode of emformer_layer_parallel. d_memory_out may be empty
// (treated as zero).
template <typename Real>
ParallelLayerGrads<Real> emformer_layer_parallel_vjp(const Matrix<Real>& centers,
                                                     const Matrix<Real>& right_copies,
                                                     const Matrix<Real>* memory, const LayerWeights<Real>& w,
                                                     const SegmentLayout& layout,
                                                     const AttentionMaskSet& masks, const ModelConfig& cfg,
                                                     const Matrix<Real>& d_centers_out,
                                                     const Matrix<Real>& d_right_out,
                                                     const Matrix<Real>& d_memory_out);

// ---------------------------------------------------------------------------
// Streaming Emformer layer.

// Per-layer state of a stream: left-context key/value rings (capacity L),
// the memory bank (capacity M) fed by the layer below, and optionally the
// raw layer inputs behind each cached row.
template <typename Real>
struct LayerStreamState {
  LayerStreamState() = default;
  LayerStreamState(const ModelConfig& cfg, bool record_inputs);

  RowRing<Real> keys;
  RowRing<Real> values;
  MemoryBank<Real> bank;
  std::optional<RowRing<Real>> inputs;
};

template <typename Real>
struct StreamStepOutput {
  Matrix<Real> centers;
  Matrix<Real> right;
  std::optional<Matrix<Real>> memory;  // 1 x d when the model has a bank
};

// One segment through one layer. Left-context keys/values come from the
// state's cache; afterwards the center rows' keys/values are appended.
// The memory bank is read, never written: committing memory vectors is the
// caller's protocol.
template <typename Real>
StreamStepOutput<Real> emformer_layer_stream_step(LayerStreamState<Real>& state, const Matrix<Real>& centers,
                                                  const Matrix<Real>& right, const LayerWeights<Real>& w,
                                                  const ModelConfig& cfg, SegmentProbe<Real>* probe = nullptr);

// ---------------------------------------------------------------------------
// AM-TRF baseline layer.

struct BlockSplit {
  std::size_t left = 0;
  std::size_t center = 0;
  std::size_t right = 0;
  std::size_t total() const { return left + center + right; }
};

template <typename Real>
struct AmtrfStepOutput {
  Matrix<Real> left;
  Matrix<Real> centers;
  Matrix<Real> right;
  std::optional<Matrix<Real>> memory;
};

// x = [left; center; right] with the left block physically present. bank
// holds this same layer's memory vectors from earlier segments (rows, oldest
// first; may be empty).
template <typename Real>
AmtrfStepOutput<Real> amtrf_layer_step(const Matrix<Real>& x, const BlockSplit& split, const Matrix<Real>& bank,
                                       const LayerWeights<Real>& w, const ModelConfig& cfg,
                                       SegmentProbe<Real>* probe = nullptr);

}  // namespace emformer
