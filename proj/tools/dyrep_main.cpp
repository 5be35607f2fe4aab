#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "dyrep/runner.hpp"

namespace {

std::string default_run_root() {
  const char* env = std::getenv("DYREP_RUN_ROOT");
  return env && *env ? env : "runs";
}

dyrep::ResolvedConfig load_config(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  dyrep::FlatConfig cfg = dyrep::FlatConfig::parse_file(path);
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    dyrep::require(eq != std::string::npos, "--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return dyrep::resolve_config(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DyRep: dynamic structural re-parameterization training"};
  app.require_subcommand(1);

  std::string run_root = default_run_root();
  app.add_option("--run-root", run_root,
                 "Directory holding run outputs (env DYREP_RUN_ROOT overrides the default)");

  auto* train = app.add_subcommand("train", "Train a model per config, growing/pruning branches");
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "Flat key=value config file")->required();
  train->add_option("--set", overrides, "Override a config key, e.g. --set t=9999");
  train->add_option("--out", out_dir, "Run directory (default <run-root>/<run.name>)");

  auto* exp = app.add_subcommand("export", "Deploy a checkpoint and write the inference model");
  std::string ckpt_path, export_out;
  exp->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  exp->add_option("--out", export_out, "Output model file")->required();

  auto* verify = app.add_subcommand("verify", "Check collapse equivalence of every live block");
  std::string verify_ckpt;
  verify->add_option("--checkpoint", verify_ckpt, "Checkpoint file")->required();

  auto* report = app.add_subcommand("score-report", "Tabulate per-interval saliency scores");
  std::string report_dir;
  report->add_option("--run", report_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      dyrep::ResolvedConfig cfg = load_config(config_path, overrides);
      const std::string dir = out_dir.empty() ? run_root + "/" + cfg.run_name : out_dir;
      dyrep::RunSummary s = dyrep::run_train(cfg, dir);
      std::cout << "run dir: " << s.run_dir << "\n"
                << "final train loss: " << s.final_train_loss << "\n"
                << "final eval accuracy: " << s.final_eval_acc << "\n"
                << "final parameter count: " << s.final_params << "\n";
    } else if (exp->parsed()) {
      dyrep::run_export(ckpt_path, export_out);
      std::cout << "wrote " << export_out << "\n";
    } else if (verify->parsed()) {
      dyrep::VerifyReport rep = dyrep::run_verify(verify_ckpt);
      for (const auto& b : rep.blocks)
        std::cout << b.id << " max abs deviation " << b.deviation
                  << (b.deviation <= rep.tolerance ? "" : "  EXCEEDS TOLERANCE") << "\n";
      if (rep.blocks.empty()) std::cout << "no live blocks; nothing to verify\n";
      std::cout << (rep.pass ? "PASS" : "FAIL") << " (tolerance " << rep.tolerance << ")\n";
      return rep.pass ? 0 : 1;
    } else if (report->parsed()) {
      std::cout << dyrep::run_score_report(report_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
