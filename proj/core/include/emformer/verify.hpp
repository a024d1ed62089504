#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "emformer/encoder.hpp"
#include "emformer/matrix.hpp"

// Executable checks over a model and an input. Each check returns a report
// instead of throwing; pass holds exactly when metric <= tolerance.

namespace emformer {

struct VerifyReport {
  std::string name;
  bool pass = false;
  double metric = 0.0;
  double tolerance = 0.0;
  std::string metric_kind;  // what metric measures, e.g. "max_abs_diff"
  // Worst offender, where applicable.
  std::optional<std::size_t> layer;
  std::optional<std::size_t> segment;
  std::optional<std::size_t> frame;
  double wall_ms = 0.0;
  nlohmann::json details = nlohmann::json::object();

  // {name, pass, metric, tolerance, details}; details also carries the
  // metric kind, the worst-offender location and wall times.
  nlohmann::json to_json() const;
};

// Runs forward_parallel and forward_stream; metric is the max abs
// difference over all output frames.
template <typename Real>
VerifyReport check_stream_parallel_equivalence(const EncoderModel<Real>& model, const Matrix<Real>& frames,
                                               double tol);

// Each probe perturbs one random frame u and re-runs forward_parallel.
// Output rows of center frames whose segment horizon is below u must stay
// bitwise identical; metric counts the rows that changed.
template <typename Real>
VerifyReport check_future_leak(const EncoderModel<Real>& model, const Matrix<Real>& frames, std::size_t n_probes,
                               std::uint64_t seed);

// Streams the input while recording layer inputs; after every segment each
// cached key/value row must equal a fresh projection of its stored input
// bit for bit. metric counts mismatching rows.
template <typename Real>
VerifyReport check_cache_consistency(const EncoderModel<Real>& model, const Matrix<Real>& frames);

// Attention probabilities from summary queries to memory keys must be
// exactly 0.0 in the parallel, streaming and AM-TRF paths, in every layer
// and segment. metric is the largest such probability.
template <typename Real>
VerifyReport check_summary_masking(const EncoderModel<Real>& model, const Matrix<Real>& frames);

// Central finite differences of <forward_parallel(frames), G> for a seeded
// random cotangent G against forward_backward. At least min_coords
// coordinates are sampled from every weight tensor, plus input frames.
// The relative error of one coordinate is |a - f| / max(|a|, |f|, floor).
struct GradientCheckOptions {
  double h = 1e-6;
  double tolerance = 1e-5;
  double floor = 1e-3;
  std::size_t min_coords = 200;
  std::uint64_t seed = 0;
};
VerifyReport check_gradients(const EncoderModel<double>& model, const Matrix<double>& frames,
                             const GradientCheckOptions& options = {});

enum class ThroughputMode { Parallel, AmtrfSequential, EmformerStream };
std::string to_string(ThroughputMode mode);
ThroughputMode throughput_mode_from_string(const std::string& s);

// Median wall time per output frame over repeats (>= 3) runs. The counted
// multiply-adds of one run are compared with the analytic whole-utterance
// model; metric is |measured / analytic - 1| with tolerance 0.02.
template <typename Real>
VerifyReport measure_throughput(const EncoderModel<Real>& model, const Matrix<Real>& frames, ThroughputMode mode,
                                std::size_t repeats);

// Streams the input step by step and compares the multiply-adds of every
// step with the analytic cost of that segment. metric is the worst relative
// deviation, tolerance 0.02.
template <typename Real>
VerifyReport check_stream_step_flops(const EncoderModel<Real>& model, const Matrix<Real>& frames);

// Deterministic N(0, 1) frames.
template <typename Real>
Matrix<Real> random_frames(std::size_t rows, std::size_t cols, std::uint64_t seed);

}  // namespace emformer
