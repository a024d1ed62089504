#include "emformer/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <string_view>

#include "emformer/error.hpp"
#include "emformer/numerics.hpp"

namespace emformer {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

// Box-Muller over the raw engine output, so draws do not depend on the
// standard library's distribution implementation.
double normal(std::mt19937_64& gen) {
  const double u1 = 1.0 - uniform01(gen);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void finish(VerifyReport& r) { r.pass = std::isfinite(r.metric) && r.metric <= r.tolerance; }

bool rows_bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}
bool rows_bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); });
}

template <typename Real>
std::size_t count_row_mismatches(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::max(a.rows(), b.rows()) + 1;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) bad += rows_bitwise_equal(a.row(i), b.row(i)) ? 0 : 1;
  return bad;
}

template <typename Real>
nlohmann::json config_summary(const EncoderModel<Real>& model, std::size_t frames) {
  return {{"config", config_to_json(model.cfg)}, {"frames", frames}};
}

}  // namespace

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json d = details;
  d["metric_kind"] = metric_kind;
  d["wall_ms"] = wall_ms;
  nlohmann::json where = nlohmann::json::object();
  if (layer) where["layer"] = *layer;
  if (segment) where["segment"] = *segment;
  if (frame) where["frame"] = *frame;
  d["worst"] = where;
  return {{"name", name}, {"pass", pass}, {"metric", metric}, {"tolerance", tolerance}, {"details", d}};
}

template <typename Real>
Matrix<Real> random_frames(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Matrix<Real> m(rows, cols);
  for (auto& v : m.data()) v = static_cast<Real>(normal(gen));
  return m;
}

// ---------------------------------------------------------------------------

template <typename Real>
VerifyReport check_stream_parallel_equivalence(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                               double tol) {
  VerifyReport r;
  r.name = "stream_parallel_equivalence";
  r.metric_kind = "max_abs_diff";
  r.tolerance = tol;
  r.details = config_summary(model, frames.rows());
  const auto t0 = Clock::now();
  const auto tp = Clock::now();
  const Matrix<Real> par = forward_parallel(model, frames).output;
  const double par_ms = ms_since(tp);
  const auto ts = Clock::now();
  const Matrix<Real> str = forward_stream(model, frames);
  const double str_ms = ms_since(ts);
  r.wall_ms = ms_since(t0);
  r.details["parallel_ms"] = par_ms;
  r.details["stream_ms"] = str_ms;

  if (par.rows() != str.rows() || par.cols() != str.cols()) {
    r.metric = std::numeric_limits<double>::infinity();
    r.details["error"] = "output shapes differ";
    finish(r);
    return r;
  }
  const SegmentLayout layout = segment_utterance(frames.rows(), model.cfg);
  double worst = 0.0;
  for (std::size_t t = 0; t < par.rows(); ++t) {
    for (std::size_t j = 0; j < par.cols(); ++j) {
      const double diff = std::abs(static_cast<double>(par(t, j)) - static_cast<double>(str(t, j)));
      if (!(diff <= worst)) {
        worst = std::isnan(diff) ? std::numeric_limits<double>::infinity() : diff;
        r.frame = t;
        r.segment = layout.segment_of(t);
      }
    }
  }
  r.metric = worst;
  finish(r);
  return r;
}

template <typename Real>
VerifyReport check_future_leak(const EncoderModel<Real>& model, const Matrix<Real>& frames, std::size_t n_probes,
                               std::uint64_t seed) {
  VerifyReport r;
  r.name = "future_leak";
  r.metric_kind = "violating_rows";
  r.tolerance = 0.0;
  r.details = config_summary(model, frames.rows());
  if (n_probes == 0) throw ConfigError("check_future_leak: n_probes must be at least 1");
  const auto t0 = Clock::now();
  const SegmentLayout layout = segment_utterance(frames.rows(), model.cfg);
  const Matrix<Real> base = forward_parallel(model, frames).output;
  std::mt19937_64 gen(seed);
  std::size_t violations = 0, checked_rows = 0, probes_with_change = 0;
  nlohmann::json offenders = nlohmann::json::array();
  for (std::size_t p = 0; p < n_probes; ++p) {
    const std::size_t u = static_cast<std::size_t>(gen() % frames.rows());
    Matrix<Real> perturbed = frames;
    for (auto& v : perturbed.row(u)) v += static_cast<Real>(1.0 + normal(gen) * normal(gen));
    const Matrix<Real> out = forward_parallel(model, perturbed).output;
    bool changed_any = false;
    for (std::size_t t = 0; t < frames.rows(); ++t) {
      const bool same = rows_bitwise_equal(base.row(t), out.row(t));
      changed_any = changed_any || !same;
      const std::size_t seg = layout.segment_of(t);
      if (layout.horizon(seg) >= u) continue;
      ++checked_rows;
      if (!same) {
        ++violations;
        if (!r.frame) {
          r.frame = t;
          r.segment = seg;
        }
        if (offenders.size() < 16) offenders.push_back({{"t", t}, {"u", u}});
      }
    }
    probes_with_change += changed_any ? 1 : 0;
  }
  r.wall_ms = ms_since(t0);
  r.metric = static_cast<double>(violations);
  r.details["probes"] = n_probes;
  r.details["seed"] = seed;
  r.details["checked_rows"] = checked_rows;
  r.details["probes_that_changed_output"] = probes_with_change;
  r.details["violations"] = offenders;
  finish(r);
  return r;
}

template <typename Real>
VerifyReport check_cache_consistency(const EncoderModel<Real>& model, const Matrix<Real>& frames) {
  VerifyReport r;
  r.name = "cache_consistency";
  r.metric_kind = "mismatching_rows";
  r.tolerance = 0.0;
  r.details = config_summary(model, frames.rows());
  const auto t0 = Clock::now();
  const ModelConfig& cfg = model.cfg;
  StreamSession<Real> session(model, {.record_inputs = true, .record_attention = false});
  std::size_t mismatches = 0, compared = 0;

  auto audit = [&] {
    const std::size_t seg = session.segments_processed() - 1;
    for (std::size_t n = 0; n < session.n_layers(); ++n) {
      const auto& st = session.layer_state(n);
      const Matrix<Real> inputs = st.inputs->to_matrix();
      const auto& w = model.layers[n];
      const Matrix<Real> normed = layer_norm(inputs, w.ln_attn_gain, w.ln_attn_bias, static_cast<Real>(cfg.eps));
      const Matrix<Real> k = matmul(normed, w.w_k);
      const Matrix<Real> v = matmul(normed, w.w_v);
      const std::size_t bad = count_row_mismatches(k, st.keys.to_matrix()) + count_row_mismatches(v, st.values.to_matrix());
      compared += 2 * inputs.rows();
      if (bad > 0 && !r.layer) {
        r.layer = n;
        r.segment = seg;
      }
      mismatches += bad;
    }
  };

  const std::size_t c = cfg.center_frames, want = c + cfg.right_frames;
  std::size_t pos = 0;
  for (; pos + want <= frames.rows(); pos += c) {
    session.step(frames.slice_rows(pos, pos + want));
    audit();
  }
  // The tail runs as one call; audit the state it leaves behind.
  const std::size_t before = session.segments_processed();
  session.finish(frames.slice_rows(pos, frames.rows()));
  if (session.segments_processed() > before) audit();

  r.wall_ms = ms_since(t0);
  r.metric = static_cast<double>(mismatches);
  r.details["rows_compared"] = compared;
  r.details["segments"] = session.segments_processed();
  finish(r);
  return r;
}

template <typename Real>
VerifyReport check_summary_masking(const EncoderModel<Real>& model, const Matrix<Real>& frames) {
  VerifyReport r;
  r.name = "summary_memory_masking";
  r.metric_kind = "max_summary_to_memory_probability";
  r.tolerance = 0.0;
  r.details = config_summary(model, frames.rows());
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t entries = 0;
  nlohmann::json per_path = nlohmann::json::object();

  auto inspect = [&](const SegmentProbe<Real>& probe, std::size_t layer, std::size_t& path_entries) {
    if (!probe.has_summary) return;
    for (const auto& head : probe.probs.heads) {
      const std::size_t q = head.rows() - 1;
      for (std::size_t k = 0; k < probe.memory_keys; ++k) {
        const double p = static_cast<double>(head(q, k));
        ++path_entries;
        if (!(p == 0.0) && !(std::abs(p) <= worst)) {
          worst = std::isnan(p) ? std::numeric_limits<double>::infinity() : std::abs(p);
          r.layer = layer;
          r.segment = probe.segment;
        }
      }
    }
  };

  std::size_t par_entries = 0;
  const auto fr = forward_parallel(model, frames, true);
  for (std::size_t n = 0; n < fr.trace->layers.size(); ++n) {
    for (const auto& probe : fr.trace->layers[n].attention.probes) inspect(probe, n, par_entries);
  }

  std::size_t str_entries = 0;
  {
    StreamSession<Real> session(model, {.record_inputs = false, .record_attention = true});
    const std::size_t c = model.cfg.center_frames, want = c + model.cfg.right_frames;
    auto audit = [&] {
      const auto& probes = session.last_probes();
      for (std::size_t k = 0; k < probes.size(); ++k) inspect(probes[k], k % session.n_layers(), str_entries);
    };
    std::size_t pos = 0;
    for (; pos + want <= frames.rows(); pos += c) {
      session.step(frames.slice_rows(pos, pos + want));
      audit();
    }
    session.finish(frames.slice_rows(pos, frames.rows()));
    audit();
  }

  std::size_t amtrf_entries = 0;
  amtrf_forward_sequential<Real>(model, frames, [&](std::size_t layer, std::size_t, const SegmentProbe<Real>& p) {
    inspect(p, layer, amtrf_entries);
  });

  entries = par_entries + str_entries + amtrf_entries;
  r.wall_ms = ms_since(t0);
  r.metric = worst;
  r.details["entries_checked"] = entries;
  r.details["parallel_entries"] = par_entries;
  r.details["stream_entries"] = str_entries;
  r.details["amtrf_entries"] = amtrf_entries;
  finish(r);
  return r;
}

// ---------------------------------------------------------------------------

VerifyReport check_gradients(const EncoderModel<double>& model, const Matrix<double>& frames,
                             const GradientCheckOptions& options) {
  VerifyReport r;
  r.name = "gradients";
  r.metric_kind = "max_rel_err";
  r.tolerance = options.tolerance;
  r.details = config_summary(model, frames.rows());
  const auto t0 = Clock::now();
  const std::size_t n_params = model.parameter_count();
  if (n_params > 50000) {
    throw ConfigError("check_gradients: model has " + std::to_string(n_params) +
                      " parameters; finite differences are limited to 50000");
  }

  std::mt19937_64 gen(options.seed);
  const Matrix<double> cot = random_frames<double>(frames.rows(), frames.cols(), gen());
  auto loss = [&](const EncoderModel<double>& m, const Matrix<double>& x) {
    const Matrix<double> out = forward_parallel(m, x).output;
    double s = 0.0;
    const auto a = out.data();
    const auto b = cot.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const EncoderGrads<double> grads = forward_backward(model, frames, cot);

  EncoderModel<double> work = model;
  Matrix<double> x = frames;
  double worst = 0.0;
  std::size_t coords = 0;
  nlohmann::json per_tensor = nlohmann::json::object();
  auto record = [&](const std::string& tensor, double analytic, double fd, std::optional<std::size_t> layer) {
    const double err = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), options.floor});
    ++coords;
    auto& slot = per_tensor[tensor];
    if (slot.is_null()) slot = {{"coords", 0}, {"max_rel_err", 0.0}};
    slot["coords"] = slot.value("coords", 0) + 1;
    slot["max_rel_err"] = std::max(slot.value("max_rel_err", 0.0), err);
    if (!(err <= worst)) {
      worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      r.layer = layer;
      r.details["worst_tensor"] = tensor;
      r.details["worst_analytic"] = analytic;
      r.details["worst_fd"] = fd;
    }
  };

  const std::size_t n_layers = model.cfg.n_layers;
  constexpr std::size_t kTensors = 14;
  const std::size_t per_tensor_draws = (options.min_coords + kTensors - 1) / kTensors;
  if (n_layers > 0) {
    for (std::size_t ti = 0; ti < kTensors; ++ti) {
      for (std::size_t k = 0; k < per_tensor_draws; ++k) {
        const std::size_t layer = static_cast<std::size_t>(gen() % n_layers);
        std::size_t idx_seen = 0;
        std::string name;
        std::span<double> values, analytic;
        work.layers[layer].for_each_tensor([&](std::string_view nm, std::span<double> v) {
          if (idx_seen++ == ti) {
            name = nm;
            values = v;
          }
        });
        idx_seen = 0;
        const_cast<LayerWeights<double>&>(grads.layers[layer]).for_each_tensor([&](std::string_view, std::span<double> v) {
          if (idx_seen++ == ti) analytic = v;
        });
        const std::size_t i = static_cast<std::size_t>(gen() % values.size());
        const double orig = values[i];
        values[i] = orig + options.h;
        const double lp = loss(work, x);
        values[i] = orig - options.h;
        const double lm = loss(work, x);
        values[i] = orig;
        record(name, analytic[i], (lp - lm) / (2.0 * options.h), layer);
      }
    }
  }
  // A few input coordinates exercise the hard-copy and memory-mean paths.
  const std::size_t input_draws = std::max<std::size_t>(per_tensor_draws, 8);
  for (std::size_t k = 0; k < input_draws; ++k) {
    const std::size_t i = static_cast<std::size_t>(gen() % x.size());
    auto xs = x.data();
    const double orig = xs[i];
    xs[i] = orig + options.h;
    const double lp = loss(work, x);
    xs[i] = orig - options.h;
    const double lm = loss(work, x);
    xs[i] = orig;
    record("input", grads.input.data()[i], (lp - lm) / (2.0 * options.h), std::nullopt);
  }

  r.wall_ms = ms_since(t0);
  r.metric = worst;
  r.details["coordinates"] = coords;
  r.details["parameters"] = n_params;
  r.details["h"] = options.h;
  r.details["floor"] = options.floor;
  r.details["seed"] = options.seed;
  r.details["per_tensor"] = per_tensor;
  finish(r);
  return r;
}

// ---------------------------------------------------------------------------

std::string to_string(ThroughputMode mode) {
  switch (mode) {
    case ThroughputMode::Parallel: return "parallel";
    case ThroughputMode::AmtrfSequential: return "amtrf_sequential";
    case ThroughputMode::EmformerStream: return "emformer_stream";
  }
  return "unknown";
}

ThroughputMode throughput_mode_from_string(const std::string& s) {
  if (s == "parallel") return ThroughputMode::Parallel;
  if (s == "amtrf_sequential") return ThroughputMode::AmtrfSequential;
  if (s == "emformer_stream") return ThroughputMode::EmformerStream;
  throw ConfigError("unknown mode '" + s + "' (expected parallel, amtrf_sequential or emformer_stream)");
}

template <typename Real>
VerifyReport measure_throughput(const EncoderModel<Real>& model, const Matrix<Real>& frames, ThroughputMode mode,
                                std::size_t repeats) {
  if (repeats < 3) throw ConfigError("measure_throughput: repeats must be at least 3");
  VerifyReport r;
  r.name = "throughput_" + to_string(mode);
  r.metric_kind = "flop_model_rel_dev";
  r.tolerance = 0.02;
  r.details = config_summary(model, frames.rows());
  r.details["mode"] = to_string(mode);
  r.details["repeats"] = repeats;

  auto run = [&] {
    switch (mode) {
      case ThroughputMode::Parallel: return forward_parallel(model, frames).output;
      case ThroughputMode::AmtrfSequential: return amtrf_forward_sequential(model, frames);
      case ThroughputMode::EmformerStream: return forward_stream(model, frames);
    }
    return Matrix<Real>();
  };

  std::vector<double> times;
  std::uint64_t measured = 0;
  const auto t0 = Clock::now();
  for (std::size_t k = 0; k < repeats; ++k) {
    FlopScope scope;
    const auto ts = Clock::now();
    const Matrix<Real> out = run();
    times.push_back(ms_since(ts));
    if (k == 0) measured = scope.elapsed();
  }
  r.wall_ms = ms_since(t0);
  std::sort(times.begin(), times.end());
  const double median_ms = times[times.size() / 2];

  const Arch arch = mode == ThroughputMode::AmtrfSequential ? Arch::AMTRF : Arch::EMFORMER;
  const bool layer0 = model.options.layer0_memory == Layer0Memory::InputMean;
  const FlopReport analytic = mode == ThroughputMode::Parallel
                                  ? parallel_utterance_flops(model.cfg, frames.rows(), layer0)
                                  : utterance_flops(model.cfg, arch, frames.rows(), layer0);
  const FlopReport emformer = utterance_flops(model.cfg, Arch::EMFORMER, frames.rows(), layer0);
  const FlopReport amtrf = utterance_flops(model.cfg, Arch::AMTRF, frames.rows(), layer0);

  r.metric = analytic.total_flops == 0
                 ? (measured == 0 ? 0.0 : std::numeric_limits<double>::infinity())
                 : std::abs(static_cast<double>(measured) / static_cast<double>(analytic.total_flops) - 1.0);
  r.details["median_ms"] = median_ms;
  r.details["min_ms"] = times.front();
  r.details["max_ms"] = times.back();
  r.details["median_ms_per_frame"] = median_ms / static_cast<double>(frames.rows());
  r.details["measured_flops"] = measured;
  r.details["analytic"] = to_json(analytic);
  r.details["utterance_emformer_over_amtrf"] =
      amtrf.total_flops == 0 ? 0.0
                             : static_cast<double>(emformer.total_flops) / static_cast<double>(amtrf.total_flops);
  r.details["steady_state_savings_ratio"] = savings_ratio(model.cfg);
  finish(r);
  return r;
}

template <typename Real>
VerifyReport check_stream_step_flops(const EncoderModel<Real>& model, const Matrix<Real>& frames) {
  VerifyReport r;
  r.name = "stream_step_flops";
  r.metric_kind = "max_step_rel_dev";
  r.tolerance = 0.02;
  r.details = config_summary(model, frames.rows());
  const auto t0 = Clock::now();
  const ModelConfig& cfg = model.cfg;
  const bool layer0 = model.options.layer0_memory == Layer0Memory::InputMean;
  StreamSession<Real> session(model);

  double worst = 0.0;
  std::uint64_t measured_total = 0, analytic_total = 0;
  std::size_t steps = 0;
  auto expected = [&](std::size_t seg, std::size_t left, std::size_t center, std::size_t right) {
    FlopReport total;
    SegmentShape shape{left, center, right, std::min(cfg.memory_size, seg), cfg.has_memory() ? 1u : 0u};
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
      SegmentShape s = shape;
      if (n == 0 && !layer0) s.memory = 0;
      total += flops_for_segment(cfg, Arch::EMFORMER, s);
    }
    return total.total_flops;
  };
  auto compare = [&](std::uint64_t measured, std::uint64_t analytic, std::size_t seg) {
    const double dev = analytic == 0 ? (measured == 0 ? 0.0 : 1.0)
                                     : std::abs(static_cast<double>(measured) / static_cast<double>(analytic) - 1.0);
    if (!(dev <= worst)) {
      worst = dev;
      r.segment = seg;
    }
    measured_total += measured;
    analytic_total += analytic;
    ++steps;
  };

  const std::size_t c = cfg.center_frames, want = c + cfg.right_frames;
  std::size_t pos = 0;
  for (; pos + want <= frames.rows(); pos += c) {
    const std::size_t seg = session.segments_processed();
    FlopScope scope;
    session.step(frames.slice_rows(pos, pos + want));
    compare(scope.elapsed(), expected(seg, std::min(cfg.left_frames, pos), c, cfg.right_frames), seg);
  }
  {
    // The tail is compared as one aggregate.
    const std::size_t seg0 = session.segments_processed();
    std::uint64_t analytic = 0;
    const std::size_t n = frames.rows();
    for (std::size_t p = pos, s = seg0; p < n; ++s) {
      const std::size_t cc = std::min(c, n - p);
      analytic += expected(s, std::min(cfg.left_frames, p), cc, std::min(cfg.right_frames, n - p - cc));
      p += cc;
    }
    FlopScope scope;
    session.finish(frames.slice_rows(pos, n));
    if (session.segments_processed() > seg0) compare(scope.elapsed(), analytic, seg0);
  }

  r.wall_ms = ms_since(t0);
  r.metric = worst;
  r.details["steps"] = steps;
  r.details["measured_flops"] = measured_total;
  r.details["analytic_flops"] = analytic_total;
  finish(r);
  return r;
}

#define EMFORMER_INSTANTIATE_VERIFY(Real)                                                                         \
  template Matrix<Real> random_frames<Real>(std::size_t, std::size_t, std::uint64_t);                             \
  template VerifyReport check_stream_parallel_equivalence(const EncoderModel<Real>&, const Matrix<Real>&, double); \
  template VerifyReport check_future_leak(const EncoderModel<Real>&, const Matrix<Real>&, std::size_t,            \
                                          std::uint64_t);                                                         \
  template VerifyReport check_cache_consistency(const EncoderModel<Real>&, const Matrix<Real>&);                  \
  template VerifyReport check_summary_masking(const EncoderModel<Real>&, const Matrix<Real>&);                    \
  template VerifyReport measure_throughput(const EncoderModel<Real>&, const Matrix<Real>&, ThroughputMode,        \
                                           std::size_t);                                                          \
  template VerifyReport check_stream_step_flops(const EncoderModel<Real>&, const Matrix<Real>&);

EMFORMER_INSTANTIATE_VERIFY(float)
EMFORMER_INSTANTIATE_VERIFY(double)

}  // namespace emformer
