#include <benchmark/benchmark.h>

#include "emformer/encoder.hpp"
#include "emformer/numerics.hpp"
#include "emformer/verify.hpp"

namespace {

using emformer::Matrix;
using emformer::ModelConfig;

ModelConfig small_segment_config(std::size_t d_model) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = d_model;
  cfg.n_heads = 4;
  cfg.ffn_dim = 4 * d_model;
  cfg.left_frames = 32;
  cfg.center_frames = 2;
  cfg.right_frames = 1;
  cfg.memory_size = 0;
  return cfg;
}

void set_counters(benchmark::State& state, std::uint64_t flops, std::size_t frames) {
  state.counters["flops_per_run"] = static_cast<double>(flops);
  state.counters["frames_per_s"] =
      benchmark::Counter(static_cast<double>(frames), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = emformer::random_frames<float>(n, n, 1);
  const auto b = emformer::random_frames<float>(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(emformer::matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

template <int Mode>
void BM_Forward(benchmark::State& state) {
  const ModelConfig cfg = small_segment_config(static_cast<std::size_t>(state.range(1)));
  const auto model = emformer::init_model<float>(cfg, 7);
  const auto frames = emformer::random_frames<float>(static_cast<std::size_t>(state.range(0)), cfg.d_model, 11);
  std::uint64_t flops = 0;
  for (auto _ : state) {
    emformer::FlopScope scope;
    if constexpr (Mode == 0) {
      benchmark::DoNotOptimize(emformer::forward_parallel(model, frames).output);
    } else if constexpr (Mode == 1) {
      benchmark::DoNotOptimize(emformer::amtrf_forward_sequential(model, frames));
    } else {
      benchmark::DoNotOptimize(emformer::forward_stream(model, frames));
    }
    flops = scope.elapsed();
  }
  set_counters(state, flops, frames.rows());
}
BENCHMARK(BM_Forward<0>)->Name("BM_ParallelForward")->Args({512, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward<1>)->Name("BM_AmtrfSequential")->Args({512, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward<2>)->Name("BM_EmformerStream")->Args({512, 32})->Unit(benchmark::kMillisecond);

void BM_StreamStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = static_cast<std::size_t>(state.range(0));
  cfg.n_heads = 8;
  cfg.ffn_dim = 4 * cfg.d_model;
  cfg.left_frames = 32;
  cfg.center_frames = 2;
  cfg.right_frames = 1;
  cfg.memory_size = 4;
  const auto model = emformer::init_model<float>(cfg, 3);
  const auto warmup = emformer::random_frames<float>(64, cfg.d_model, 5);
  const auto chunk = emformer::random_frames<float>(3, cfg.d_model, 6);
  emformer::StreamSession<float> session(model);
  session.push(warmup);
  for (auto _ : state) {
    // Keep the session in steady state: push exactly one segment's worth.
    benchmark::DoNotOptimize(session.push(chunk.slice_rows(0, cfg.center_frames)));
  }
}
BENCHMARK(BM_StreamStep)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
