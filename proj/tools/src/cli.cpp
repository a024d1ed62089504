#include "emformer_tools/cli.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "emformer/config.hpp"
#include "emformer/encoder.hpp"
#include "emformer/error.hpp"
#include "emformer/verify.hpp"
#include "emformer_tools/feature_file.hpp"

namespace emformer::tools {

namespace {

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string checks;
  std::size_t frames = 0;
  std::size_t probes = 50;
  std::size_t repeats = 3;
  std::string mode;
  std::string input;
  std::string output;
  std::size_t stack = 1;
  std::string a, b;
  double tol = 0.0;
};

const std::vector<std::string> kAllChecks = {"equivalence", "leak", "cache", "masking", "step_flops", "gradients"};

// Input frames for verify and bench: independent of the weight stream.
constexpr std::uint64_t kInputSalt = 0x5eedf00d5eedf00dULL;

void print_json(std::ostream& out, const nlohmann::json& j) { out << j.dump(2) << '\n'; }

int cmd_validate(const Options& o, std::ostream& out, std::ostream& err) {
  nlohmann::json result;
  std::vector<std::string> errors;
  try {
    errors = validate(load_config(o.config));
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  result["valid"] = errors.empty();
  result["errors"] = errors;
  print_json(out, result);
  for (const auto& e : errors) err << "invalid config: " << e << '\n';
  return errors.empty() ? kExitOk : kExitCheckFailed;
}

int cmd_latency(const Options& o, std::ostream& out) {
  const ModelConfig cfg = load_config(o.config);
  require_valid(cfg);
  nlohmann::json j;
  j["eil_ms"] = eil_ms(cfg);
  j["min_frame_latency_ms"] = min_frame_latency_ms(cfg);
  j["max_frame_latency_ms"] = max_frame_latency_ms(cfg);
  j["left_ms"] = static_cast<double>(cfg.left_frames) * cfg.frame_ms;
  j["center_ms"] = static_cast<double>(cfg.center_frames) * cfg.frame_ms;
  j["right_ms"] = static_cast<double>(cfg.right_frames) * cfg.frame_ms;
  print_json(out, j);
  return kExitOk;
}

int cmd_flops(const Options& o, std::ostream& out) {
  const ModelConfig cfg = load_config(o.config);
  require_valid(cfg);
  nlohmann::json j;
  j["per_layer_per_segment"] = {{"EMFORMER", to_json(flops_per_segment(cfg, Arch::EMFORMER))},
                                {"AMTRF", to_json(flops_per_segment(cfg, Arch::AMTRF))}};
  j["savings_ratio"] = savings_ratio(cfg);
  const double lcr = static_cast<double>(cfg.left_frames + cfg.center_frames + cfg.right_frames);
  j["left_fraction"] = static_cast<double>(cfg.left_frames) / lcr;
  print_json(out, j);
  return kExitOk;
}

std::vector<std::string> split_checks(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (std::find(kAllChecks.begin(), kAllChecks.end(), item) == kAllChecks.end()) {
      throw ConfigError("unknown check '" + item + "'");
    }
    out.push_back(item);
  }
  return out;
}

std::size_t default_frames(const ModelConfig& cfg) { return 4 * cfg.center_frames + cfg.right_frames; }

template <typename Real>
int run_verify(const ModelConfig& cfg, const Options& o, std::ostream& out) {
  const EncoderModel<Real> model = init_model<Real>(cfg, o.seed);
  const std::size_t t = o.frames > 0 ? o.frames : default_frames(cfg);
  const Matrix<Real> frames = random_frames<Real>(t, cfg.d_model, o.seed ^ kInputSalt);

  std::vector<std::string> checks;
  const bool explicit_list = !o.checks.empty();
  if (explicit_list) {
    checks = split_checks(o.checks);
  } else {
    checks = kAllChecks;
    // Finite differences are only run by default on models small enough
    // for them.
    if (model.parameter_count() > 50000) checks.pop_back();
  }

  nlohmann::json reports = nlohmann::json::array();
  bool all_pass = true;
  for (const auto& name : checks) {
    VerifyReport r;
    if (name == "equivalence") {
      r = check_stream_parallel_equivalence(model, frames, std::is_same_v<Real, double> ? 1e-9 : 1e-4);
    } else if (name == "leak") {
      r = check_future_leak(model, frames, o.probes, o.seed);
    } else if (name == "cache") {
      r = check_cache_consistency(model, frames);
    } else if (name == "masking") {
      r = check_summary_masking(model, frames);
    } else if (name == "step_flops") {
      r = check_stream_step_flops(model, frames);
    } else if (name == "gradients") {
      const EncoderModel<double> m64 = init_model<double>(cfg, o.seed);
      r = check_gradients(m64, random_frames<double>(t, cfg.d_model, o.seed ^ kInputSalt), {.seed = o.seed});
    }
    all_pass = all_pass && r.pass;
    reports.push_back(r.to_json());
  }
  nlohmann::json j;
  j["pass"] = all_pass;
  j["seed"] = o.seed;
  j["frames"] = t;
  j["checks"] = reports;
  print_json(out, j);
  return all_pass ? kExitOk : kExitCheckFailed;
}

template <typename Real>
int run_bench(const ModelConfig& cfg, const Options& o, std::ostream& out) {
  const EncoderModel<Real> model = init_model<Real>(cfg, o.seed);
  const Matrix<Real> frames = random_frames<Real>(o.frames, cfg.d_model, o.seed ^ kInputSalt);
  const VerifyReport r = measure_throughput(model, frames, throughput_mode_from_string(o.mode), o.repeats);
  print_json(out, r.to_json());
  return r.pass ? kExitOk : kExitCheckFailed;
}

template <typename Real>
int run_forward(const ModelConfig& cfg, const Options& o, std::ostream& out) {
  const FeatureFile in = read_feature_file(o.input);
  Matrix<Real> frames = in.values.cast<Real>();
  if (o.stack > 1) frames = stack_frames(frames, o.stack);
  if (frames.cols() != cfg.d_model) {
    throw ShapeError("input width " + std::to_string(frames.cols()) + (o.stack > 1 ? " after stacking" : "") +
                     " does not match d_model " + std::to_string(cfg.d_model));
  }
  const EncoderModel<Real> model = init_model<Real>(cfg, o.seed);
  Matrix<Real> result;
  if (o.mode == "parallel") {
    result = forward_parallel(model, frames).output;
  } else if (o.mode == "stream") {
    result = forward_stream(model, frames);
  } else {
    throw ConfigError("unknown run mode '" + o.mode + "' (expected parallel or stream)");
  }
  write_feature_file(o.output, FeatureFile{dtype_of<Real>(), result.template cast<double>()});
  nlohmann::json j;
  j["frames"] = result.rows();
  j["dim"] = result.cols();
  j["dtype"] = to_string(dtype_of<Real>());
  j["mode"] = o.mode;
  j["output"] = o.output;
  print_json(out, j);
  return kExitOk;
}

int cmd_diff(const Options& o, std::ostream& out) {
  const FeatureFile a = read_feature_file(o.a);
  const FeatureFile b = read_feature_file(o.b);
  nlohmann::json j;
  const bool shape = a.values.rows() == b.values.rows() && a.values.cols() == b.values.cols();
  j["shape_match"] = shape;
  j["dtype_match"] = a.dtype == b.dtype;
  if (shape) {
    j["max_abs_diff"] = max_abs_diff(a.values, b.values);
    j["bitwise_equal"] = a.dtype == b.dtype && bitwise_equal(a.values, b.values);
  }
  print_json(out, j);
  return shape && max_abs_diff(a.values, b.values) <= o.tol ? kExitOk : kExitCheckFailed;
}

template <typename Fn>
int with_dtype(const ModelConfig& cfg, Fn&& fn) {
  return cfg.dtype == DType::F32 ? fn(float{}) : fn(double{});
}

}  // namespace

int execute_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming memory-transformer encoder: validation, cost reports, checks and forward runs",
               "emformer"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", o.config, "Model config JSON")->required(); };
  auto* validate_cmd = app.add_subcommand("validate", "Validate a config");
  add_config(validate_cmd);
  auto* latency_cmd = app.add_subcommand("latency", "Encoder-induced and per-frame latency (JSON)");
  add_config(latency_cmd);
  auto* flops_cmd = app.add_subcommand("flops", "Per-segment cost of both architectures and the saving (JSON)");
  add_config(flops_cmd);

  auto* verify_cmd = app.add_subcommand("verify", "Run the check suite on a seeded model and input (JSON)");
  add_config(verify_cmd);
  verify_cmd->add_option("--seed", o.seed, "Seed for weights and input")->required();
  verify_cmd->add_option("--checks", o.checks, "Comma-separated subset of: equivalence,leak,cache,masking,step_flops,gradients");
  verify_cmd->add_option("--frames", o.frames, "Input frames (default 4C + R)")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--probes", o.probes, "Leak probes")->check(CLI::PositiveNumber);

  auto* bench_cmd = app.add_subcommand("bench", "Time one forward mode and cross-check its FLOP count (JSON)");
  add_config(bench_cmd);
  bench_cmd->add_option("--frames", o.frames, "Input frames")->required()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--repeats", o.repeats, "Timed runs (at least 3)")->required()->check(CLI::Range(3, 1000000));
  bench_cmd->add_option("--mode", o.mode, "parallel, amtrf_sequential or emformer_stream")
      ->required()
      ->check(CLI::IsMember({"parallel", "amtrf_sequential", "emformer_stream"}));
  bench_cmd->add_option("--seed", o.seed, "Seed for weights and input (default 0)");

  auto* run_cmd = app.add_subcommand("run", "Forward pass over a feature file");
  add_config(run_cmd);
  run_cmd->add_option("--seed", o.seed, "Weight seed")->required();
  run_cmd->add_option("--input", o.input, "Input feature file")->required();
  run_cmd->add_option("--mode", o.mode, "parallel or stream")->required()->check(CLI::IsMember({"parallel", "stream"}));
  run_cmd->add_option("--output", o.output, "Output feature file")->required();
  run_cmd->add_option("--stack", o.stack, "Stack S consecutive frames first")->check(CLI::PositiveNumber);

  auto* diff_cmd = app.add_subcommand("diff", "Compare two feature files (JSON)");
  diff_cmd->add_option("--a", o.a, "First file")->required();
  diff_cmd->add_option("--b", o.b, "Second file")->required();
  diff_cmd->add_option("--tol", o.tol, "Max abs difference accepted (default 0)")->check(CLI::NonNegativeNumber);

  std::vector<std::string> argv_store{"emformer"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (validate_cmd->parsed()) return cmd_validate(o, out, err);
    if (diff_cmd->parsed()) return cmd_diff(o, out);
    if (latency_cmd->parsed()) return cmd_latency(o, out);
    if (flops_cmd->parsed()) return cmd_flops(o, out);
    const ModelConfig cfg = load_config(o.config);
    require_valid(cfg);
    if (verify_cmd->parsed()) return with_dtype(cfg, [&](auto r) { return run_verify<decltype(r)>(cfg, o, out); });
    if (bench_cmd->parsed()) return with_dtype(cfg, [&](auto r) { return run_bench<decltype(r)>(cfg, o, out); });
    if (run_cmd->parsed()) return with_dtype(cfg, [&](auto r) { return run_forward<decltype(r)>(cfg, o, out); });
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  err << "error: no subcommand\n";
  return kExitUsage;
}

}  // namespace emformer::tools
