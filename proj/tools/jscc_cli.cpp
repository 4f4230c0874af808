// jscc_cli: train models and run evaluation experiments from JSON configs.
//
//   jscc_cli train-jscc     -c configs/desk_train.json
//   jscc_cli train-denoiser -c configs/desk_train.json
//   jscc_cli eval           -c configs/desk_eval.json --set channel.snr_test_db=[5,15]
//   jscc_cli ablate-alpha   -c configs/desk_ablation.json
//   jscc_cli patch-hist     -c configs/kodak_patches.json
//   jscc_cli trace          -c configs/desk_trace.json
//
// A manifest.json written by a previous run is accepted in place of a config
// and reproduces that run.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure, 1 anything else.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "jscc/experiments.hpp"

namespace {

void print_summary(const jscc::Report& r, const std::string& file) {
  auto it = r.files.find(file);
  if (it != r.files.end()) std::cout << it->second;
  if (r.manifest.value("checkpoint_hash_mismatch", false)) {
    std::cout << "WARNING: checkpoint digest differs from the manifest ("
              << r.manifest["checkpoint"]["fnv1a64"].get<std::string>() << " vs "
              << r.manifest["expected_checkpoint_hash"].get<std::string>() << ")\n";
  }
  std::cout << "wrote " << r.dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep JSCC training and iterative source error correction experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config or run manifest (JSON)")->required();
    sub->add_option("--set", overrides, "override a config value, e.g. --set isec.alpha=4");
  };
  auto* train_jscc = app.add_subcommand("train-jscc", "train encoder and decoder");
  auto* train_den = app.add_subcommand("train-denoiser", "train the codeword denoiser of a checkpoint");
  auto* eval = app.add_subcommand("eval", "paired one-shot vs ISEC evaluation");
  auto* ablate = app.add_subcommand("ablate-alpha", "prior weight ablation with traces");
  auto* patch = app.add_subcommand("patch-hist", "per-patch gain histograms");
  auto* trace = app.add_subcommand("trace", "per-step ISEC trajectories");
  for (auto* s : {train_jscc, train_den, eval, ablate, patch, trace}) add_common(s);

  CLI11_PARSE(app, argc, argv);

  try {
    const jscc::ExperimentConfig cfg = jscc::load_experiment(config_path, overrides);
    if (train_jscc->parsed()) {
      jscc::run_train_jscc(cfg);
      std::cout << "saved " << cfg.outputs.checkpoint << "\n";
    } else if (train_den->parsed()) {
      jscc::run_train_denoiser(cfg);
      std::cout << "saved " << cfg.outputs.checkpoint << "\n";
    } else if (eval->parsed()) {
      print_summary(jscc::run_eval(cfg), "summary.csv");
    } else if (ablate->parsed()) {
      print_summary(jscc::run_alpha_ablation(cfg), "ablation.json");
    } else if (patch->parsed()) {
      auto r = jscc::run_patch_histogram(cfg);
      print_summary(r, "");
    } else if (trace->parsed()) {
      print_summary(jscc::run_trace(cfg), "");
    }
  } catch (const jscc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
