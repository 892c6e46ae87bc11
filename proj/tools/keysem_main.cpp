#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "keysem/commands.hpp"

namespace {

int emit(const keysem::cli::CommandResult& res, const std::string& out_path) {
  const std::string text = res.report.dump(2) + "\n";
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) {
      std::cerr << "cannot open output file: " << out_path << "\n";
      return 2;
    }
    os << text;
  }
  std::cout << text;
  return res.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keysem: key-semantic sparse attention verification harness"};
  app.require_subcommand(1);

  std::string out_path;
  app.add_option("--out", out_path, "also write the JSON report to this path");

  keysem::cli::EquivConfig equiv_cfg;
  auto* equiv = app.add_subcommand("equiv", "gather/mask/dense equivalence suites");
  equiv->add_option("--seed", equiv_cfg.seed);
  equiv->add_option("--cases", equiv_cfg.cases);
  equiv->add_option("--tolerance", equiv_cfg.tolerance);
#ifdef KEYSEM_FAULT_INJECTION
  equiv->add_flag("--inject-fault", equiv_cfg.inject_fault,
                  "offset gathered indices by one (suite must fail)");
#endif

  keysem::cli::GradcheckConfig grad_cfg;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_option("--seed", grad_cfg.seed);
  grad->add_option("--tolerance", grad_cfg.tolerance);

  keysem::cli::FlopsConfig flops_cfg;
  flops_cfg.inputs = {64, 64, 180, 7, 512, 6, 6, 256};
  auto* flops = app.add_subcommand("flops", "analytic FLOPs / memory cost report");
  flops->add_option("--height", flops_cfg.inputs.height);
  flops->add_option("--width", flops_cfg.inputs.width);
  flops->add_option("--channels", flops_cfg.inputs.channels);
  flops->add_option("--window", flops_cfg.inputs.window);
  flops->add_option("--k", flops_cfg.inputs.k);
  flops->add_option("--heads", flops_cfg.inputs.heads);
  flops->add_option("--layers", flops_cfg.inputs.n_layers);
  flops->add_option("--token-pixels", flops_cfg.inputs.token_pixels);

  keysem::cli::BenchConfig bench_cfg;
  auto* bench = app.add_subcommand("bench", "peak-element micro-benchmarks");
  bench->add_option("--seed", bench_cfg.seed);
  bench->add_option("--n-sweep", bench_cfg.n_sweep)->delimiter(',');
  bench->add_option("--k-sweep", bench_cfg.k_sweep)->delimiter(',');
  bench->add_option("--k", bench_cfg.fixed_k, "k used in the N sweep");
  bench->add_option("--n", bench_cfg.fixed_n, "N used in the k sweep");
  bench->add_option("--channels", bench_cfg.channels);
  bench->add_option("--heads", bench_cfg.heads);
  bench->add_option("--budget", bench_cfg.budget_elements,
                    "peak-element budget; larger configs report over_budget");
  bench->add_flag("--timing", bench_cfg.timing,
                  "include wall-clock times (non-deterministic output)");

  keysem::cli::DenoiseConfig den_cfg;
  std::size_t fixed_k = 0;
  std::vector<std::size_t> k_set;
  std::string den_out;
  auto* den = app.add_subcommand("denoise", "toy single-image denoising demo");
  den->add_option("--seed", den_cfg.seed);
  den->add_option("--height", den_cfg.height);
  den->add_option("--width", den_cfg.width);
  den->add_option("--channels", den_cfg.channels, "model feature width");
  den->add_option("--window", den_cfg.window);
  den->add_option("--heads", den_cfg.heads);
  den->add_option("--layers", den_cfg.layers, "layers per stage");
  den->add_option("--stages", den_cfg.stages);
  den->add_option("--steps", den_cfg.steps);
  den->add_option("--lr", den_cfg.lr);
  den->add_option("--sigma", den_cfg.sigma);
  den->add_option("--k", fixed_k, "fixed top-k policy");
  den->add_option("--k-set", k_set, "random top-k policy choices")->delimiter(',');
  den->add_option("--threads", den_cfg.threads);
  den->add_option("--input", den_cfg.input_path, "input PGM (default: synthetic target)");
  den->add_option("--out-prefix", den_out, "write <prefix>.ckpt and <prefix>.pgm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Usage problems (and --help) funnel through here; keep 0 for help and
    // map every parse failure to the documented usage-error code.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (equiv->parsed()) return emit(keysem::cli::cmd_equiv(equiv_cfg), out_path);
    if (grad->parsed()) return emit(keysem::cli::cmd_gradcheck(grad_cfg), out_path);
    if (flops->parsed()) return emit(keysem::cli::cmd_flops(flops_cfg), out_path);
    if (bench->parsed()) return emit(keysem::cli::cmd_bench(bench_cfg), out_path);
    if (den->parsed()) {
      if (fixed_k != 0 && !k_set.empty()) {
        std::cerr << "denoise: --k and --k-set are mutually exclusive\n";
        return 2;
      }
      if (fixed_k != 0) den_cfg.k_policy = keysem::KPolicy::Fixed(fixed_k);
      if (!k_set.empty()) den_cfg.k_policy = keysem::KPolicy::RandomFrom(k_set);
      den_cfg.out_prefix = den_out;
      return emit(keysem::cli::cmd_denoise(den_cfg), out_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
