#include "emformer/encoder.hpp"

#include <cmath>
#include <random>
#include <string_view>

#include "emformer/error.hpp"
#include "emformer/numerics.hpp"

namespace emformer {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t tensor_seed(std::uint64_t seed, std::size_t layer, std::string_view name) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(layer) ^ splitmix64(fnv1a64(name))));
}

void fill_uniform(std::span<double> out, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : out) {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    v = a * (2.0 * u - 1.0);
  }
}

LayerWeights<double> init_layer(const ModelConfig& cfg, std::uint64_t seed, std::size_t layer) {
  const std::size_t d = cfg.d_model, f = cfg.ffn_dim;
  LayerWeights<double> w = LayerWeights<double>::zeros(d, f);
  w.for_each_tensor([&](std::string_view name, std::span<double> v) {
    const std::uint64_t s = tensor_seed(seed, layer, name);
    if (name == "w1") {
      fill_uniform(v, d, f, s);
    } else if (name == "w2") {
      fill_uniform(v, f, d, s);
    } else if (name.starts_with("w_")) {
      fill_uniform(v, d, d, s);
    } else if (name.ends_with("_gain")) {
      std::fill(v.begin(), v.end(), 1.0);
    }
  });
  return w;
}

template <typename To, typename From>
LayerWeights<To> cast_layer(const LayerWeights<From>& w) {
  LayerWeights<To> out = LayerWeights<To>::zeros(w.w1.rows(), w.w1.cols());
  std::vector<std::span<const From>> src;
  w.for_each_tensor([&](std::string_view, std::span<const From> v) { src.push_back(v); });
  std::size_t idx = 0;
  out.for_each_tensor([&](std::string_view, std::span<To> v) {
    const auto s = src[idx++];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(s[i]);
  });
  return out;
}

template <typename Real>
void check_frames(const EncoderModel<Real>& model, const Matrix<Real>& frames, const char* what) {
  if (frames.rows() == 0) throw EmptyInputError(std::string(what) + ": no input frames");
  if (frames.cols() != model.cfg.d_model) {
    throw ShapeError(std::string(what) + ": frame width " + std::to_string(frames.cols()) + " != d_model " +
                     std::to_string(model.cfg.d_model));
  }
}

}  // namespace

template <typename Real>
std::size_t EncoderModel<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : layers) n += w.parameter_count();
  return n;
}

template <typename Real>
EncoderModel<Real> init_model(const ModelConfig& cfg, std::uint64_t seed, EncoderOptions options) {
  require_valid(cfg);
  EncoderModel<Real> model;
  model.cfg = cfg;
  model.options = options;
  model.init_seed = seed;
  model.layers.reserve(cfg.n_layers);
  for (std::size_t n = 0; n < cfg.n_layers; ++n) {
    if constexpr (std::is_same_v<Real, double>) {
      model.layers.push_back(init_layer(cfg, seed, n));
    } else {
      model.layers.push_back(cast_layer<Real>(init_layer(cfg, seed, n)));
    }
  }
  return model;
}

template <typename To, typename From>
EncoderModel<To> cast_model(const EncoderModel<From>& model) {
  EncoderModel<To> out;
  out.cfg = model.cfg;
  out.cfg.dtype = dtype_of<To>();
  out.options = model.options;
  out.init_seed = model.init_seed;
  for (const auto& w : model.layers) out.layers.push_back(cast_layer<To>(w));
  return out;
}

template <typename Real>
Matrix<Real> stack_frames(const Matrix<Real>& raw, std::size_t stride) {
  if (stride == 0) throw ShapeError("stack_frames: stride must be at least 1");
  const std::size_t out_rows = raw.rows() / stride;
  if (out_rows == 0) {
    throw EmptyInputError("stack_frames: " + std::to_string(raw.rows()) + " frames is fewer than stride " +
                          std::to_string(stride));
  }
  const std::size_t d0 = raw.cols();
  Matrix<Real> out(out_rows, stride * d0);
  for (std::size_t t = 0; t < out_rows; ++t) {
    auto dst = out.row(t);
    for (std::size_t s = 0; s < stride; ++s) {
      auto src = raw.row(t * stride + s);
      std::copy(src.begin(), src.end(), dst.begin() + s * d0);
    }
  }
  return out;
}

template <typename Real>
ForwardResult<Real> forward_parallel(const EncoderModel<Real>& model, const Matrix<Real>& frames, bool with_trace) {
  check_frames(model, frames, "forward_parallel");
  const ModelConfig& cfg = model.cfg;
  ForwardResult<Real> result;
  const SegmentLayout layout = segment_utterance(frames.rows(), cfg);
  const AttentionMaskSet masks = build_masks(layout, cfg);
  if (with_trace) result.trace.emplace().layout = layout;

  Matrix<Real> centers = frames;
  Matrix<Real> right = gather_right_copies(frames, layout);
  std::optional<Matrix<Real>> memory;
  if (model.layer_has_memory(0)) memory = segment_means(frames, layout);

  for (std::size_t n = 0; n < cfg.n_layers; ++n) {
    const Matrix<Real>* mem_in = model.layer_has_memory(n) ? &*memory : nullptr;
    LayerTrace<Real>* lt = nullptr;
    if (with_trace) {
      lt = &result.trace->layers.emplace_back();
      lt->centers_in = centers;
      lt->right_copies_in = right;
      if (mem_in) lt->memory_in = *mem_in;
    }
    auto out = emformer_layer_parallel(centers, right, mem_in, model.layers[n], layout, masks, cfg,
                                       lt ? &lt->attention : nullptr);
    centers = std::move(out.centers);
    right = std::move(out.right_copies);
    if (cfg.has_memory()) memory = std::move(out.memory);
    if (lt && memory) lt->memory_out = *memory;
  }
  result.output = std::move(centers);
  return result;
}

// ---------------------------------------------------------------------------

template <typename Real>
StreamSession<Real>::StreamSession(const EncoderModel<Real>& model, StreamOptions options)
    : model_(&model), options_(options) {
  layers_.reserve(model.cfg.n_layers);
  for (std::size_t n = 0; n < model.cfg.n_layers; ++n) layers_.emplace_back(model.cfg, options.record_inputs);
}

template <typename Real>
Matrix<Real> StreamSession<Real>::process_segment(const Matrix<Real>& centers, const Matrix<Real>& right) {
  const ModelConfig& cfg = model_->cfg;
  const std::size_t seg = segments_;

  // Vector produced below for this segment; committed to the next layer's
  // bank only once that layer has finished the segment.
  std::optional<Matrix<Real>> pending;
  if (model_->layer_has_memory(0)) pending = row_mean(centers, 0, centers.rows());

  Matrix<Real> c = centers;
  Matrix<Real> r = right;
  for (std::size_t n = 0; n < layers_.size(); ++n) {
    SegmentProbe<Real> probe;
    probe.segment = seg;
    auto out = emformer_layer_stream_step(layers_[n], c, r, model_->layers[n], cfg,
                                          options_.record_attention ? &probe : nullptr);
    if (pending) layers_[n].bank.push(pending->row(0), seg);
    pending = std::move(out.memory);
    c = std::move(out.centers);
    r = std::move(out.right);
    if (options_.record_attention) probes_.push_back(std::move(probe));
  }
  ++segments_;
  return c;
}

template <typename Real>
Matrix<Real> StreamSession<Real>::step(const Matrix<Real>& chunk) {
  if (finished_) throw StateError("stream_step: session already finished");
  if (carry_.rows() > 0) throw StateError("stream_step: frames are buffered from push(); use push() or finish()");
  probes_.clear();
  const ModelConfig& cfg = model_->cfg;
  const std::size_t want = cfg.center_frames + cfg.right_frames;
  if (chunk.rows() != want || chunk.cols() != cfg.d_model) {
    throw ShapeError("stream_step: chunk is " + std::to_string(chunk.rows()) + "x" + std::to_string(chunk.cols()) +
                     ", expected " + std::to_string(want) + "x" + std::to_string(cfg.d_model));
  }
  return process_segment(chunk.slice_rows(0, cfg.center_frames), chunk.slice_rows(cfg.center_frames, want));
}

template <typename Real>
Matrix<Real> StreamSession<Real>::push(const Matrix<Real>& frames) {
  if (finished_) throw StateError("stream push: session already finished");
  const ModelConfig& cfg = model_->cfg;
  if (frames.rows() > 0 && frames.cols() != cfg.d_model) throw ShapeError("stream push: frame width mismatch");
  probes_.clear();
  carry_.append_rows(frames);
  Matrix<Real> out(0, cfg.d_model);
  const std::size_t c = cfg.center_frames, want = c + cfg.right_frames;
  while (carry_.rows() >= want) {
    out.append_rows(process_segment(carry_.slice_rows(0, c), carry_.slice_rows(c, want)));
    carry_ = carry_.slice_rows(c, carry_.rows());
  }
  return out;
}

template <typename Real>
Matrix<Real> StreamSession<Real>::finish(const Matrix<Real>& trailing) {
  if (finished_) throw StateError("stream_finish: session already finished");
  const ModelConfig& cfg = model_->cfg;
  if (trailing.rows() > 0 && trailing.cols() != cfg.d_model) throw ShapeError("stream_finish: frame width mismatch");
  finished_ = true;
  probes_.clear();
  Matrix<Real> frames = carry_;
  frames.append_rows(trailing);
  carry_ = Matrix<Real>();
  Matrix<Real> out(0, cfg.d_model);
  const std::size_t n = frames.rows();
  for (std::size_t pos = 0; pos < n;) {
    const std::size_t c = std::min(cfg.center_frames, n - pos);
    const std::size_t r = std::min(cfg.right_frames, n - pos - c);
    out.append_rows(process_segment(frames.slice_rows(pos, pos + c), frames.slice_rows(pos + c, pos + c + r)));
    pos += c;
  }
  return out;
}

template <typename Real>
Matrix<Real> forward_stream(const EncoderModel<Real>& model, const Matrix<Real>& frames) {
  check_frames(model, frames, "forward_stream");
  const std::size_t c = model.cfg.center_frames, want = c + model.cfg.right_frames;
  StreamSession<Real> session(model);
  Matrix<Real> out(0, model.cfg.d_model);
  std::size_t pos = 0;
  for (; pos + want <= frames.rows(); pos += c) out.append_rows(session.step(frames.slice_rows(pos, pos + want)));
  out.append_rows(session.finish(frames.slice_rows(pos, frames.rows())));
  return out;
}

// ---------------------------------------------------------------------------

template <typename Real>
Matrix<Real> amtrf_forward_sequential(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                      const AmtrfProbeSink<Real>& sink) {
  check_frames(model, frames, "amtrf_forward_sequential");
  const ModelConfig& cfg = model.cfg;
  const SegmentLayout layout = segment_utterance(frames.rows(), cfg);
  std::vector<MemoryBank<Real>> banks;
  for (std::size_t n = 0; n < cfg.n_layers; ++n) banks.emplace_back(cfg.memory_size, cfg.d_model);

  Matrix<Real> out(0, cfg.d_model);
  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const Segment& seg = layout.segments[i];
    const std::size_t start = seg.center.begin;
    const std::size_t left = std::min(cfg.left_frames, start);
    const BlockSplit split{left, seg.center.size(), seg.right_copy.size()};
    Matrix<Real> x = frames.slice_rows(start - left, seg.center.end + split.right);
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
      SegmentProbe<Real> probe;
      probe.segment = i;
      auto o = amtrf_layer_step(x, split, banks[n].vectors(), model.layers[n], cfg, sink ? &probe : nullptr);
      if (o.memory) banks[n].push(o.memory->row(0), i);
      x = vstack({&o.left, &o.centers, &o.right});
      if (sink) sink(n, i, probe);
    }
    out.append_rows(x.slice_rows(left, left + split.center));
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename Real>
EncoderGrads<Real> forward_backward(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                    const Matrix<Real>& out_grad) {
  check_frames(model, frames, "forward_backward");
  if (out_grad.rows() != frames.rows() || out_grad.cols() != frames.cols()) {
    throw ShapeError("forward_backward: cotangent must match the output shape");
  }
  const ModelConfig& cfg = model.cfg;
  const std::size_t d = cfg.d_model;
  const SegmentLayout layout = segment_utterance(frames.rows(), cfg);
  const AttentionMaskSet masks = build_masks(layout, cfg);

  // Forward, keeping each layer's inputs; the layer vjp recomputes the rest.
  struct LayerInputs {
    Matrix<Real> centers, right;
    std::optional<Matrix<Real>> memory;
  };
  std::vector<LayerInputs> inputs;
  Matrix<Real> centers = frames;
  Matrix<Real> right = gather_right_copies(frames, layout);
  std::optional<Matrix<Real>> memory;
  if (model.layer_has_memory(0)) memory = segment_means(frames, layout);
  for (std::size_t n = 0; n < cfg.n_layers; ++n) {
    LayerInputs in{centers, right, std::nullopt};
    if (model.layer_has_memory(n)) in.memory = *memory;
    auto out = emformer_layer_parallel(centers, right, in.memory ? &*in.memory : nullptr, model.layers[n], layout,
                                       masks, cfg);
    inputs.push_back(std::move(in));
    centers = std::move(out.centers);
    right = std::move(out.right_copies);
    if (cfg.has_memory()) memory = std::move(out.memory);
  }

  EncoderGrads<Real> grads;
  grads.layers.resize(cfg.n_layers);
  Matrix<Real> d_centers = out_grad;
  Matrix<Real> d_right(layout.hardcopy_total, d);
  Matrix<Real> d_memory;
  for (std::size_t n = cfg.n_layers; n-- > 0;) {
    const auto& in = inputs[n];
    auto g = emformer_layer_parallel_vjp(in.centers, in.right, in.memory ? &*in.memory : nullptr, model.layers[n],
                                         layout, masks, cfg, d_centers, d_right, d_memory);
    grads.layers[n] = std::move(g.weights);
    d_centers = std::move(g.centers);
    d_right = std::move(g.right_copies);
    d_memory = std::move(g.memory);
  }

  // Hard copies and bottom-layer memory means are functions of the input.
  grads.input = std::move(d_centers);
  for (const auto& seg : layout.segments) {
    const Range src = seg.right_source();
    for (std::size_t k = 0; k < src.size(); ++k) {
      grads.input.add_rows_at(src.begin + k, d_right.slice_rows(seg.right_copy.begin + k, seg.right_copy.begin + k + 1));
    }
  }
  if (d_memory.rows() > 0) {
    for (std::size_t i = 0; i < layout.n_segments(); ++i) {
      const Range c = layout.segments[i].center;
      Matrix<Real> share = d_memory.slice_rows(i, i + 1);
      for (auto& v : share.data()) v /= static_cast<Real>(c.size());
      for (std::size_t f = c.begin; f < c.end; ++f) grads.input.add_rows_at(f, share);
    }
  }
  return grads;
}

#define EMFORMER_INSTANTIATE_ENCODER(Real)                                                                   \
  template struct EncoderModel<Real>;                                                                        \
  template class StreamSession<Real>;                                                                        \
  template EncoderModel<Real> init_model(const ModelConfig&, std::uint64_t, EncoderOptions);                 \
  template Matrix<Real> stack_frames(const Matrix<Real>&, std::size_t);                                      \
  template ForwardResult<Real> forward_parallel(const EncoderModel<Real>&, const Matrix<Real>&, bool);       \
  template Matrix<Real> forward_stream(const EncoderModel<Real>&, const Matrix<Real>&);                      \
  template Matrix<Real> amtrf_forward_sequential(const EncoderModel<Real>&, const Matrix<Real>&,             \
                                                 const AmtrfProbeSink<Real>&);                               \
  template EncoderGrads<Real> forward_backward(const EncoderModel<Real>&, const Matrix<Real>&,               \
                                               const Matrix<Real>&);

EMFORMER_INSTANTIATE_ENCODER(float)
EMFORMER_INSTANTIATE_ENCODER(double)

template EncoderModel<float> cast_model(const EncoderModel<double>&);
template EncoderModel<double> cast_model(const EncoderModel<float>&);

}  // namespace emformer
