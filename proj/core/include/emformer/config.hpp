#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "emformer/matrix.hpp"

namespace emformer {

enum class Arch { AMTRF, EMFORMER };

// Structural hyperparameters. Block sizes are in encoder frames; frame_ms
// converts them to milliseconds. Defaults are the 24-layer medium-latency
// model: 8 heads, 512 wide, 2048 FFN, 640/1280/320 ms left/center/right at
// 40 ms per stacked frame, memory bank of 4.
struct ModelConfig {
  std::size_t n_layers = 24;
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t ffn_dim = 2048;
  std::size_t left_frames = 16;
  std::size_t center_frames = 32;
  std::size_t right_frames = 8;
  std::size_t memory_size = 4;
  double frame_ms = 40.0;
  double dropout = 0.0;
  double eps = 1e-5;
  DType dtype = DType::F32;
  Arch arch = Arch::EMFORMER;

  bool has_memory() const { return memory_size > 0; }
  bool operator==(const ModelConfig&) const = default;
};

// Every violated invariant, one message each. Empty means valid.
std::vector<std::string> validate(const ModelConfig& cfg);

// Throws ConfigError listing every violation.
void require_valid(const ModelConfig& cfg);

// Unknown fields and ill-typed values throw ConfigError. Missing fields keep
// their defaults.
ModelConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig load_config(const std::string& path);

std::string to_string(Arch arch);
std::string to_string(DType dtype);

// Encoder-induced latency: look-ahead plus half the center block, in ms.
double eil_ms(const ModelConfig& cfg);

// Latency of the last and first center frame of a block.
double min_frame_latency_ms(const ModelConfig& cfg);
double max_frame_latency_ms(const ModelConfig& cfg);

// Multiply-add counts for one layer processing one segment.
struct FlopReport {
  std::uint64_t qkv_projection_flops = 0;
  std::uint64_t attention_flops = 0;
  std::uint64_t output_projection_flops = 0;
  std::uint64_t ffn_flops = 0;
  std::uint64_t total_flops = 0;

  FlopReport& operator+=(const FlopReport& o);
  bool operator==(const FlopReport&) const = default;
};

nlohmann::json to_json(const FlopReport& r);

// Actual block lengths seen by one segment. summary is 1 when the model
// has a memory bank, otherwise 0.
struct SegmentShape {
  std::size_t left = 0;
  std::size_t center = 0;
  std::size_t right = 0;
  std::size_t memory = 0;
  std::size_t summary = 0;
};

// Cost model, with d = d_model, f = ffn_dim, s = summary and
//   rows = center + right               (EMFORMER)
//   rows = left + center + right        (AMTRF)
//   keys = memory + left + center + right
// in multiply-adds:
//   qkv projection    (rows + s) d^2 + 2 rows d^2 + 2 memory d^2
//   attention         2 d (rows * keys + s * (keys - memory))
//   output projection (rows + s) d^2
//   ffn               2 d f rows
// The summary query never scores memory keys. Left-context keys/values of
// EMFORMER are cache reads and cost nothing. These are exactly the
// multiply-adds the streaming kernels execute.
FlopReport flops_for_segment(const ModelConfig& cfg, Arch arch, const SegmentShape& shape);

// Steady state: full L, C, R and a full memory bank.
FlopReport flops_per_segment(const ModelConfig& cfg, Arch arch);

// 1 - emformer_total / amtrf_total in steady state.
double savings_ratio(const ModelConfig& cfg);

// Whole-utterance cost of T frames through all layers, following the
// segmentation and bank fill-up the streaming paths go through.
// layer0_memory selects whether the EMFORMER bottom layer has a memory bank.
FlopReport utterance_flops(const ModelConfig& cfg, Arch arch, std::size_t total_frames,
                           bool layer0_memory = true);

// Whole-utterance cost of the EMFORMER parallel path. It matches
// utterance_flops except that every memory vector is projected to keys and
// values once per layer instead of once per segment that reads it.
FlopReport parallel_utterance_flops(const ModelConfig& cfg, std::size_t total_frames, bool layer0_memory = true);

}  // namespace emformer
