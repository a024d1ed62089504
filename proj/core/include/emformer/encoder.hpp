#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "emformer/config.hpp"
#include "emformer/layer.hpp"
#include "emformer/layout.hpp"
#include "emformer/matrix.hpp"

namespace emformer {

// Where the bottom layer's memory bank comes from. The bottom layer has no
// layer below it, so by default its bank holds the means of previous raw
// input center blocks.
enum class Layer0Memory { InputMean, Empty };

struct EncoderOptions {
  Layer0Memory layer0_memory = Layer0Memory::InputMean;
  bool operator==(const EncoderOptions&) const = default;
};

template <typename Real>
struct EncoderModel {
  ModelConfig cfg;
  EncoderOptions options;
  std::uint64_t init_seed = 0;
  std::vector<LayerWeights<Real>> layers;

  // Whether layer n has memory keys.
  bool layer_has_memory(std::size_t n) const {
    return cfg.has_memory() && (n > 0 || options.layer0_memory == Layer0Memory::InputMean);
  }
  std::size_t parameter_count() const;
};

// Weight initializer.
//
// Every tensor gets its own std::mt19937_64 stream, seeded with
// splitmix64(seed ^ splitmix64(layer ^ splitmix64(fnv1a64(tensor name)))).
// A draw maps the top 53 bits of a 64-bit output to u in [0, 1); weights are
// a * (2u - 1) with a = sqrt(6 / (fan_in + fan_out)). Biases start at 0,
// layer-norm gains at 1. Results do not depend on construction order.
template <typename Real>
EncoderModel<Real> init_model(const ModelConfig& cfg, std::uint64_t seed, EncoderOptions options = {});

// Same (cfg, seed) in another precision: weights are drawn in double and
// rounded, so the f32 model is the rounding of the f64 model.
template <typename To, typename From>
EncoderModel<To> cast_model(const EncoderModel<From>& model);

// Concatenates S consecutive frames; a trailing remainder is dropped.
template <typename Real>
Matrix<Real> stack_frames(const Matrix<Real>& raw, std::size_t stride);

// Intermediates of one layer of forward_parallel.
template <typename Real>
struct LayerTrace {
  Matrix<Real> centers_in;
  Matrix<Real> right_copies_in;
  std::optional<Matrix<Real>> memory_in;  // rows = segments of the layer below
  Matrix<Real> memory_out;
  ParallelLayerTrace<Real> attention;
};

template <typename Real>
struct EncoderTrace {
  SegmentLayout layout;
  std::vector<LayerTrace<Real>> layers;
};

template <typename Real>
struct ForwardResult {
  Matrix<Real> output;
  std::optional<EncoderTrace<Real>> trace;
};

// Training-mode forward: every layer processes all segments at once with
// the hard-copied right contexts and masked attention.
template <typename Real>
ForwardResult<Real> forward_parallel(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                     bool with_trace = false);

struct StreamOptions {
  bool record_inputs = false;     // keep the layer inputs behind cached keys
  bool record_attention = false;  // keep the last step's attention probabilities
};

// Streaming inference session. Holds a pointer to the model, which must
// outlive the session. Single-owner; not for concurrent use.
template <typename Real>
class StreamSession {
 public:
  explicit StreamSession(const EncoderModel<Real>& model, StreamOptions options = {});

  // chunk = the next C center frames followed by the R look-ahead frames.
  // The look-ahead frames are sent again as the start of the next chunk.
  Matrix<Real> step(const Matrix<Real>& chunk);

  // Buffers arbitrary frame counts and runs every segment whose look-ahead
  // is complete.
  Matrix<Real> push(const Matrix<Real>& frames);

  // Processes buffered frames plus trailing as the final segments, with
  // look-ahead truncated at the end of the utterance.
  Matrix<Real> finish(const Matrix<Real>& trailing);

  std::size_t segments_processed() const { return segments_; }
  bool finished() const { return finished_; }
  std::size_t buffered_frames() const { return carry_.rows(); }
  const LayerStreamState<Real>& layer_state(std::size_t n) const { return layers_.at(n); }
  std::size_t n_layers() const { return layers_.size(); }
  // Attention probabilities of every segment run by the most recent call,
  // segment by segment and layer by layer within a segment (record_attention
  // only).
  const std::vector<SegmentProbe<Real>>& last_probes() const { return probes_; }

 private:
  Matrix<Real> process_segment(const Matrix<Real>& centers, const Matrix<Real>& right);

  const EncoderModel<Real>* model_;
  StreamOptions options_;
  std::vector<LayerStreamState<Real>> layers_;
  std::vector<SegmentProbe<Real>> probes_;
  Matrix<Real> carry_;
  std::size_t segments_ = 0;
  bool finished_ = false;
};

template <typename Real>
StreamSession<Real> stream_create(const EncoderModel<Real>& model, StreamOptions options = {}) {
  return StreamSession<Real>(model, options);
}

// Runs a whole utterance through a fresh session in C+R chunks.
template <typename Real>
Matrix<Real> forward_stream(const EncoderModel<Real>& model, const Matrix<Real>& frames);

// Observer for the AM-TRF baseline: called with (layer, segment, probe)
// after every layer step.
template <typename Real>
using AmtrfProbeSink = std::function<void(std::size_t, std::size_t, const SegmentProbe<Real>&)>;

// AM-TRF baseline: physically chunks the input, re-runs the left context
// through every layer and carries memory within each layer.
template <typename Real>
Matrix<Real> amtrf_forward_sequential(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                      const AmtrfProbeSink<Real>& sink = {});

template <typename Real>
struct EncoderGrads {
  Matrix<Real> input;
  std::vector<LayerWeights<Real>> layers;
};

// Gradients of <forward_parallel(frames), out_grad>.
template <typename Real>
EncoderGrads<Real> forward_backward(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                    const Matrix<Real>& out_grad);

}  // namespace emformer
