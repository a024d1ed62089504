#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "emformer/config.hpp"
#include "emformer/error.hpp"

namespace emformer {
namespace {

bool has_error(const ModelConfig& cfg, const std::string& fragment) {
  for (const auto& e : validate(cfg)) {
    if (e.find(fragment) != std::string::npos) return true;
  }
  return false;
}

ModelConfig ms_config(double left_ms, double center_ms, double right_ms, std::size_t memory = 0) {
  ModelConfig cfg;
  cfg.frame_ms = 40.0;
  cfg.left_frames = static_cast<std::size_t>(left_ms / 40.0);
  cfg.center_frames = static_cast<std::size_t>(center_ms / 40.0);
  cfg.right_frames = static_cast<std::size_t>(right_ms / 40.0);
  cfg.memory_size = memory;
  return cfg;
}

TEST(Config, DefaultsAreValid) {
  const ModelConfig cfg;
  EXPECT_TRUE(validate(cfg).empty());
  EXPECT_EQ(cfg.n_layers, 24u);
  EXPECT_EQ(cfg.d_model, 512u);
  EXPECT_EQ(cfg.d_model % cfg.n_heads, 0u);
}

TEST(Config, ReportsEveryViolation) {
  ModelConfig cfg;
  cfg.d_model = 10;
  cfg.n_heads = 4;
  cfg.center_frames = 0;
  cfg.eps = 0.0;
  EXPECT_TRUE(has_error(cfg, "d_model not divisible by n_heads"));
  EXPECT_TRUE(has_error(cfg, "center_frames must be at least 1"));
  EXPECT_TRUE(has_error(cfg, "eps"));
  EXPECT_EQ(validate(cfg).size(), 3u);
  EXPECT_THROW(require_valid(cfg), ConfigError);
}

TEST(Config, DegenerateButValidCorners) {
  ModelConfig cfg;
  cfg.left_frames = 0;
  cfg.right_frames = 0;
  cfg.memory_size = 0;
  cfg.n_layers = 0;
  EXPECT_TRUE(validate(cfg).empty());
}

TEST(ConfigJson, RoundTrips) {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.left_frames = 7;
  cfg.dtype = DType::F64;
  cfg.arch = Arch::AMTRF;
  cfg.dropout = 0.1;
  EXPECT_EQ(config_from_json(config_to_json(cfg)), cfg);
}

TEST(ConfigJson, HasExactlyTheModelFields) {
  const auto j = config_to_json(ModelConfig{});
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  const std::vector<std::string> expect = {"arch",        "center_frames", "d_model",   "dropout",  "dtype",
                                           "eps",         "ffn_dim",       "frame_ms",  "left_frames",
                                           "memory_size", "n_heads",       "n_layers",  "right_frames"};
  EXPECT_EQ(keys, expect);
  EXPECT_EQ(j["dtype"], "f32");
  EXPECT_EQ(j["arch"], "EMFORMER");
}

TEST(ConfigJson, MissingFieldsKeepDefaults) {
  const auto cfg = config_from_json(nlohmann::json{{"n_layers", 2}});
  EXPECT_EQ(cfg.n_layers, 2u);
  EXPECT_EQ(cfg.d_model, ModelConfig{}.d_model);
}

TEST(ConfigJson, RejectsBadInput) {
  EXPECT_THROW(config_from_json(nlohmann::json{{"n_layer", 2}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"n_layers", -1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"n_layers", 1.5}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"n_layers", "2"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"dtype", "f16"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"arch", "LSTM"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(ConfigJson, LoadConfigReportsFileProblems) {
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), ConfigError);
  const auto path = std::filesystem::temp_directory_path() / "emformer_bad_config.json";
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_config(path.string()), ConfigError);
  std::filesystem::remove(path);
}

TEST(Latency, EncoderInducedLatencyExamples) {
  EXPECT_EQ(eil_ms(ms_config(640, 1280, 320)), 960.0);
  EXPECT_EQ(eil_ms(ms_config(640, 640, 320)), 640.0);
  EXPECT_EQ(eil_ms(ms_config(1280, 80, 40)), 80.0);
}

TEST(Latency, PerFrameRange) {
  const auto cfg = ms_config(640, 1280, 320);
  EXPECT_EQ(min_frame_latency_ms(cfg), 320.0);
  EXPECT_EQ(max_frame_latency_ms(cfg), 1600.0);
  // EIL is the mean of the first and last frame's latency.
  EXPECT_EQ(eil_ms(cfg), 0.5 * (min_frame_latency_ms(cfg) + max_frame_latency_ms(cfg)));
}

TEST(Flops, HandComputedSegment) {
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.ffn_dim = 8;
  // left 2, center 3, right 1, memory 2, summary 1.
  const SegmentShape shape{2, 3, 1, 2, 1};
  const auto e = flops_for_segment(cfg, Arch::EMFORMER, shape);
  // rows = 4, keys = 8.
  EXPECT_EQ(e.qkv_projection_flops, (5u + 8u + 4u) * 16u);
  EXPECT_EQ(e.attention_flops, 2u * 4u * (4u * 8u + 1u * 6u));
  EXPECT_EQ(e.output_projection_flops, 5u * 16u);
  EXPECT_EQ(e.ffn_flops, 2u * 4u * 8u * 4u);
  EXPECT_EQ(e.total_flops, e.qkv_projection_flops + e.attention_flops + e.output_projection_flops + e.ffn_flops);
  const auto a = flops_for_segment(cfg, Arch::AMTRF, shape);
  // rows = 6 for AM-TRF, which recomputes the left context.
  EXPECT_EQ(a.ffn_flops, 2u * 4u * 8u * 6u);
  EXPECT_EQ(a.attention_flops, 2u * 4u * (6u * 8u + 1u * 6u));
}

TEST(Flops, WithoutMemoryTheSavingIsTheLeftFraction) {
  for (std::size_t l : {0u, 4u, 32u})
    for (std::size_t c : {1u, 2u, 32u})
      for (std::size_t r : {0u, 1u, 8u}) {
        ModelConfig cfg;
        cfg.left_frames = l;
        cfg.center_frames = c;
        cfg.right_frames = r;
        cfg.memory_size = 0;
        EXPECT_NEAR(savings_ratio(cfg), static_cast<double>(l) / static_cast<double>(l + c + r), 1e-12);
      }
}

TEST(Flops, LowLatencySavingExceedsNinetyOnePercent) {
  EXPECT_GT(savings_ratio(ms_config(1280, 80, 40)), 0.91);
}

TEST(Flops, UtteranceTotalFollowsSegmentation) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 4;
  cfg.ffn_dim = 8;
  cfg.left_frames = 2;
  cfg.center_frames = 2;
  cfg.right_frames = 1;
  cfg.memory_size = 1;
  // T = 5: segments [0,2) r1, [2,4) r1, [4,5) r0.
  FlopReport expect;
  for (std::size_t n = 0; n < 2; ++n) {
    expect += flops_for_segment(cfg, Arch::EMFORMER, {0, 2, 1, 0, 1});
    expect += flops_for_segment(cfg, Arch::EMFORMER, {2, 2, 1, 1, 1});
    expect += flops_for_segment(cfg, Arch::EMFORMER, {2, 1, 0, 1, 1});
  }
  EXPECT_EQ(utterance_flops(cfg, Arch::EMFORMER, 5), expect);
  // Without a bottom-layer bank, layer 0 never has memory keys.
  FlopReport without;
  without += flops_for_segment(cfg, Arch::EMFORMER, {0, 2, 1, 0, 1});
  without += flops_for_segment(cfg, Arch::EMFORMER, {2, 2, 1, 0, 1});
  without += flops_for_segment(cfg, Arch::EMFORMER, {2, 1, 0, 0, 1});
  without += flops_for_segment(cfg, Arch::EMFORMER, {0, 2, 1, 0, 1});
  without += flops_for_segment(cfg, Arch::EMFORMER, {2, 2, 1, 1, 1});
  without += flops_for_segment(cfg, Arch::EMFORMER, {2, 1, 0, 1, 1});
  EXPECT_EQ(utterance_flops(cfg, Arch::EMFORMER, 5, false), without);
}

TEST(Flops, ParallelProjectsEachMemoryVectorOnce) {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.d_model = 4;
  cfg.ffn_dim = 8;
  cfg.left_frames = 2;
  cfg.center_frames = 2;
  cfg.right_frames = 1;
  cfg.memory_size = 2;
  // 4 segments read 0 + 1 + 2 + 2 = 5 bank slots; the parallel path
  // projects 4 memory vectors instead, saving 2 * d * d per layer.
  const auto stream = utterance_flops(cfg, Arch::EMFORMER, 8);
  const auto par = parallel_utterance_flops(cfg, 8);
  EXPECT_EQ(stream.qkv_projection_flops - par.qkv_projection_flops, 3u * 2u * 16u);
  EXPECT_EQ(stream.total_flops - par.total_flops, 3u * 2u * 16u);
  // Without a bottom-layer bank only two layers read memory.
  EXPECT_EQ(utterance_flops(cfg, Arch::EMFORMER, 8, false).total_flops - parallel_utterance_flops(cfg, 8, false).total_flops,
            2u * 2u * 16u);
  cfg.memory_size = 0;
  EXPECT_EQ(parallel_utterance_flops(cfg, 8), utterance_flops(cfg, Arch::EMFORMER, 8));
}

}  // namespace
}  // namespace emformer
