#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keysem/cost_model.hpp"
#include "keysem/stage.hpp"

namespace keysem::cli {

// Exit codes: 0 success, 1 verification failure, 2 usage/config error
// (the config errors surface as exceptions and are mapped by the tool).
struct CommandResult {
  int exit_code = 0;
  nlohmann::ordered_json report;
};

struct EquivConfig {
  std::uint64_t seed = 0;
  std::size_t cases = 500;
  double tolerance = 1e-9;
  bool inject_fault = false;  // verification of the verifier; test use only
};
CommandResult cmd_equiv(const EquivConfig& cfg);

struct GradcheckConfig {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  double fd_step = 1e-5;
  std::size_t attention_cases = 20;
  std::size_t layer_cases = 15;
  std::size_t stage_cases = 10;
  std::size_t model_cases = 5;
};
CommandResult cmd_gradcheck(const GradcheckConfig& cfg);

struct FlopsConfig {
  CostInputs inputs;
};
CommandResult cmd_flops(const FlopsConfig& cfg);

struct BenchConfig {
  std::uint64_t seed = 0;
  std::vector<std::size_t> n_sweep = {512, 1024, 2048, 4096};
  std::vector<std::size_t> k_sweep = {32, 64, 128, 256, 512};
  std::size_t fixed_k = 32;     // k used in the N sweep
  std::size_t fixed_n = 1024;   // N used in the k sweep
  std::size_t channels = 16;    // embed width d
  std::size_t heads = 1;
  // Configurations whose analytic peak exceeds this are reported as
  // "over_budget" instead of being executed (the out-of-memory analogue).
  std::uint64_t budget_elements = 40'000'000;
  bool timing = false;  // wall-clock is opt-in; it breaks report determinism
};
CommandResult cmd_bench(const BenchConfig& cfg);

struct DenoiseConfig {
  std::uint64_t seed = 42;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 16;  // model width
  std::size_t window = 8;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t stages = 2;
  std::size_t steps = 300;
  double lr = 0.03;
  double sigma = 25.0 / 255.0;
  KPolicy k_policy = KPolicy::RandomFrom({4, 8, 16});
  std::size_t threads = 1;
  std::string input_path;  // optional PGM; empty -> built-in synthetic target
  std::string out_prefix;  // optional; writes <prefix>.ckpt/.json/.pgm
};
CommandResult cmd_denoise(const DenoiseConfig& cfg);

/// Built-in synthetic restoration target: checkerboard overlaid with a
/// diagonal gradient, values in [0, 1].
FeatureMap synthetic_target(std::size_t height, std::size_t width);

FeatureMap add_gaussian_noise(const FeatureMap& img, double sigma, RngStream& rng);

}  // namespace keysem::cli
