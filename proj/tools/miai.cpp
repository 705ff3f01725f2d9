#include <CLI11.hpp>

#include <iostream>

#include "miai/cli.hpp"
#include "miai/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"miai: multimodal VAE lab with iterative amortized inference"};
  app.require_subcommand(1);
  app.set_version_flag("--version", miai::kVersion);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::vector<std::string> metrics;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
    sub->add_option("--seed", seed, "root seed (overrides experiment.seed)");
  };
  auto* gen = app.add_subcommand("gen-data", "generate or import the dataset cache");
  auto* train = app.add_subcommand("train", "train every configured family (stage 1, then stage 2)");
  auto* eval = app.add_subcommand("eval", "compute metrics from trained checkpoints");
  auto* report = app.add_subcommand("report", "comparison table and curve files from metrics CSVs");
  for (auto* s : {gen, train, eval, report}) add_common(s);
  report->add_option("--metrics", metrics, "metrics CSV files (default: <out>/metrics.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : miai::kExitConfig;
  }

  try {
    auto cfg = miai::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (gen->parsed() || train->parsed() || eval->parsed() || report->parsed()) {
      for (auto* s : {gen, train, eval, report}) {
        if (s->parsed() && s->count("--seed") > 0) cfg.seed = seed;
      }
    }
    if (gen->parsed()) {
      miai::cmd_gen_data(cfg, std::cerr);
    } else if (train->parsed()) {
      miai::cmd_train(cfg, std::cerr, miai::thread_cap());
    } else if (eval->parsed()) {
      miai::cmd_eval(cfg, std::cerr);
    } else {
      if (metrics.empty()) metrics.push_back(miai::run_paths(cfg).metrics());
      const auto summary = miai::cmd_report(metrics, cfg.out_dir, std::cerr);
      std::cout << summary.table;
    }
  } catch (const std::exception& e) {
    std::cerr << "miai: error: " << e.what() << '\n';
    return miai::exit_code_for(e);
  }
  return miai::kExitOk;
}
