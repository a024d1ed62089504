#include "emformer/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "emformer/error.hpp"

namespace emformer {

std::vector<std::string> validate(const ModelConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.d_model == 0) errors.emplace_back("d_model must be positive");
  if (cfg.n_heads == 0) {
    errors.emplace_back("n_heads must be positive");
  } else if (cfg.d_model % cfg.n_heads != 0) {
    errors.emplace_back("d_model not divisible by n_heads (" + std::to_string(cfg.d_model) + " % " +
                        std::to_string(cfg.n_heads) + " != 0)");
  }
  if (cfg.ffn_dim == 0) errors.emplace_back("ffn_dim must be positive");
  if (cfg.center_frames == 0) errors.emplace_back("center_frames must be at least 1");
  if (!(cfg.frame_ms > 0.0) || !std::isfinite(cfg.frame_ms)) errors.emplace_back("frame_ms must be positive");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) errors.emplace_back("dropout must lie in [0, 1)");
  if (!(cfg.eps > 0.0) || !std::isfinite(cfg.eps)) errors.emplace_back("eps must be positive");
  return errors;
}

void require_valid(const ModelConfig& cfg) {
  auto errors = validate(cfg);
  if (errors.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : errors) msg += " " + e + ";";
  throw ConfigError(msg);
}

std::string to_string(Arch arch) { return arch == Arch::AMTRF ? "AMTRF" : "EMFORMER"; }
std::string to_string(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

namespace {

std::size_t read_count(const nlohmann::json& v, const std::string& key) {
  if (v.is_number_integer()) {
    if (v.get<std::int64_t>() >= 0) return v.get<std::size_t>();
    throw ConfigError("field '" + key + "' must be non-negative, got " + v.dump());
  }
  throw ConfigError("field '" + key + "' must be an integer count, got " + v.dump());
}

double read_real(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("field '" + key + "' must be a number, got " + v.dump());
  return v.get<double>();
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig cfg;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_layers") {
      cfg.n_layers = read_count(v, key);
    } else if (key == "d_model") {
      cfg.d_model = read_count(v, key);
    } else if (key == "n_heads") {
      cfg.n_heads = read_count(v, key);
    } else if (key == "ffn_dim") {
      cfg.ffn_dim = read_count(v, key);
    } else if (key == "left_frames") {
      cfg.left_frames = read_count(v, key);
    } else if (key == "center_frames") {
      cfg.center_frames = read_count(v, key);
    } else if (key == "right_frames") {
      cfg.right_frames = read_count(v, key);
    } else if (key == "memory_size") {
      cfg.memory_size = read_count(v, key);
    } else if (key == "frame_ms") {
      cfg.frame_ms = read_real(v, key);
    } else if (key == "dropout") {
      cfg.dropout = read_real(v, key);
    } else if (key == "eps") {
      cfg.eps = read_real(v, key);
    } else if (key == "dtype") {
      const auto s = v.is_string() ? v.get<std::string>() : std::string();
      if (s == "f32") {
        cfg.dtype = DType::F32;
      } else if (s == "f64") {
        cfg.dtype = DType::F64;
      } else {
        throw ConfigError("field 'dtype' must be \"f32\" or \"f64\", got " + v.dump());
      }
    } else if (key == "arch") {
      const auto s = v.is_string() ? v.get<std::string>() : std::string();
      if (s == "AMTRF") {
        cfg.arch = Arch::AMTRF;
      } else if (s == "EMFORMER") {
        cfg.arch = Arch::EMFORMER;
      } else {
        throw ConfigError("field 'arch' must be \"AMTRF\" or \"EMFORMER\", got " + v.dump());
      }
    } else {
      throw ConfigError("unknown config field '" + key + "'");
    }
  }
  return cfg;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {
      {"n_layers", cfg.n_layers},
      {"d_model", cfg.d_model},
      {"n_heads", cfg.n_heads},
      {"ffn_dim", cfg.ffn_dim},
      {"left_frames", cfg.left_frames},
      {"center_frames", cfg.center_frames},
      {"right_frames", cfg.right_frames},
      {"memory_size", cfg.memory_size},
      {"frame_ms", cfg.frame_ms},
      {"dropout", cfg.dropout},
      {"eps", cfg.eps},
      {"dtype", to_string(cfg.dtype)},
      {"arch", to_string(cfg.arch)},
  };
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

double eil_ms(const ModelConfig& cfg) {
  return static_cast<double>(cfg.right_frames) * cfg.frame_ms +
         0.5 * static_cast<double>(cfg.center_frames) * cfg.frame_ms;
}

double min_frame_latency_ms(const ModelConfig& cfg) {
  return static_cast<double>(cfg.right_frames) * cfg.frame_ms;
}

double max_frame_latency_ms(const ModelConfig& cfg) {
  return static_cast<double>(cfg.right_frames + cfg.center_frames) * cfg.frame_ms;
}

FlopReport& FlopReport::operator+=(const FlopReport& o) {
  qkv_projection_flops += o.qkv_projection_flops;
  attention_flops += o.attention_flops;
  output_projection_flops += o.output_projection_flops;
  ffn_flops += o.ffn_flops;
  total_flops += o.total_flops;
  return *this;
}

nlohmann::json to_json(const FlopReport& r) {
  return {
      {"qkv_projection_flops", r.qkv_projection_flops},
      {"attention_flops", r.attention_flops},
      {"output_projection_flops", r.output_projection_flops},
      {"ffn_flops", r.ffn_flops},
      {"total_flops", r.total_flops},
  };
}

FlopReport flops_for_segment(const ModelConfig& cfg, Arch arch, const SegmentShape& shape) {
  const std::uint64_t d = cfg.d_model;
  const std::uint64_t f = cfg.ffn_dim;
  const std::uint64_t s = shape.summary;
  const std::uint64_t m = shape.memory;
  const std::uint64_t rows =
      shape.center + shape.right + (arch == Arch::AMTRF ? shape.left : std::size_t{0});
  const std::uint64_t keys = shape.memory + shape.left + shape.center + shape.right;

  FlopReport r;
  r.qkv_projection_flops = ((rows + s) + 2 * rows + 2 * m) * d * d;
  r.attention_flops = 2 * d * (rows * keys + s * (keys - m));
  r.output_projection_flops = (rows + s) * d * d;
  r.ffn_flops = 2 * d * f * rows;
  r.total_flops = r.qkv_projection_flops + r.attention_flops + r.output_projection_flops + r.ffn_flops;
  return r;
}

FlopReport flops_per_segment(const ModelConfig& cfg, Arch arch) {
  return flops_for_segment(cfg, arch,
                           {cfg.left_frames, cfg.center_frames, cfg.right_frames, cfg.memory_size,
                            cfg.has_memory() ? std::size_t{1} : std::size_t{0}});
}

double savings_ratio(const ModelConfig& cfg) {
  const double amtrf = static_cast<double>(flops_per_segment(cfg, Arch::AMTRF).total_flops);
  const double emformer = static_cast<double>(flops_per_segment(cfg, Arch::EMFORMER).total_flops);
  if (amtrf <= 0.0) return 0.0;
  return std::clamp(1.0 - emformer / amtrf, 0.0, 1.0);
}

FlopReport utterance_flops(const ModelConfig& cfg, Arch arch, std::size_t total_frames, bool layer0_memory) {
  FlopReport total;
  const std::size_t c = cfg.center_frames;
  if (c == 0) return total;
  const std::size_t n_segments = (total_frames + c - 1) / c;
  const std::size_t summary = cfg.has_memory() ? 1 : 0;
  for (std::size_t i = 0; i < n_segments; ++i) {
    const std::size_t start = i * c;
    const std::size_t center = std::min(c, total_frames - start);
    const std::size_t remaining = total_frames - std::min(total_frames, start + c);
    SegmentShape shape{std::min(cfg.left_frames, start), center, std::min(cfg.right_frames, remaining),
                       std::min(cfg.memory_size, i), summary};
    for (std::size_t n = 0; n < cfg.n_layers; ++n) {
      SegmentShape layer_shape = shape;
      if (arch == Arch::EMFORMER && n == 0 && !layer0_memory) layer_shape.memory = 0;
      total += flops_for_segment(cfg, arch, layer_shape);
    }
  }
  return total;
}

FlopReport parallel_utterance_flops(const ModelConfig& cfg, std::size_t total_frames, bool layer0_memory) {
  FlopReport total = utterance_flops(cfg, Arch::EMFORMER, total_frames, layer0_memory);
  const std::size_t c = cfg.center_frames;
  if (c == 0 || !cfg.has_memory()) return total;
  const std::uint64_t n_segments = (total_frames + c - 1) / c;
  std::uint64_t bank_reads = 0;
  for (std::uint64_t i = 0; i < n_segments; ++i) bank_reads += std::min<std::uint64_t>(cfg.memory_size, i);
  const std::uint64_t layers = cfg.n_layers - (cfg.n_layers > 0 && !layer0_memory ? 1 : 0);
  const std::uint64_t dd = 2 * static_cast<std::uint64_t>(cfg.d_model) * cfg.d_model;
  total.qkv_projection_flops = total.qkv_projection_flops - layers * bank_reads * dd + layers * n_segments * dd;
  total.total_flops = total.qkv_projection_flops + total.attention_flops + total.output_projection_flops +
                      total.ffn_flops;
  return total;
}

}  // namespace emformer
