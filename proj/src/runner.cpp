#include "dyrep/runner.hpp"

#include "dyrep/checkpoint.hpp"
#include "dyrep/logs.hpp"
#include "dyrep/model_file.hpp"
#include "dyrep/rep_algebra.hpp"

namespace dyrep {

namespace {

template <typename T>
RunSummary run_train_typed(const ResolvedConfig& cfg, const std::string& run_dir) {
  RunPaths paths{run_dir};
  paths.prepare();
  write_manifest(cfg, paths);

  auto [train_ds, test_ds] = make_datasets<T>(cfg.data);
  TrainState<T> state;
  state.model = build_model<T>(cfg.model, SplitRng(cfg.train.seed));
  state.ledger = SaliencyLedger(cfg.train.metric);

  TrainHooks<T> hooks;
  hooks.save = [&](TrainState<T>& st, bool diverged) {
    save_checkpoint(st, cfg, diverged ? paths.diverged_checkpoint() : paths.last_checkpoint());
  };

  RunSummary summary;
  summary.run_dir = run_dir;
  summary.result = train(state, train_ds, test_ds, cfg.train, &hooks);
  save_checkpoint(state, cfg, paths.final_checkpoint());

  write_metrics(summary.result.epochs, paths.metrics());
  write_structure(summary.result.events, paths.structure());
  write_scores(summary.result.scores, paths.scores());

  const auto& last = summary.result.epochs.back();
  summary.final_train_loss = last.train_loss;
  summary.final_eval_acc = last.eval_acc;
  summary.final_params = last.params;
  return summary;
}

template <typename T>
void run_export_typed(const std::string& ckpt_path, const std::string& out_path) {
  ResolvedConfig cfg;
  TrainState<T> state = load_checkpoint<T>(ckpt_path, &cfg);
  deploy(state.model);
  write_model_file(state.model, cfg.data, out_path);
}

template <typename T>
VerifyReport run_verify_typed(const std::string& ckpt_path) {
  CheckpointData<T> data = load_checkpoint_full<T>(ckpt_path, nullptr);
  VerifyReport rep;
  rep.tolerance = sizeof(T) == 4 ? 1e-4 : 1e-8;
  SplitRng probe(0xd19e77);
  data.state.model.visit_all_blocks([&](DyRepBlock<T>& b) {
    if (!b.expanded()) return;
    ConvParams<T> eq = collapse_block(b);
    // The collapsed conv sealed into the checkpoint at save time; a corrupted
    // or bit-rotted block no longer reproduces it.
    ConvParams<T> ref = eq;
    auto itw = data.collapsed.find(b.id + ".weight");
    require(itw != data.collapsed.end(), "checkpoint has no sealed collapse for block " + b.id);
    ref.weight.data = itw->second;
    if (auto itb = data.collapsed.find(b.id + ".bias"); itb != data.collapsed.end()) {
      ref.has_bias = true;
      ref.bias.data = itb->second;
    }
    SplitRng rng = probe.split(b.id);
    double dev = 0.0;
    const int h = 2 * b.conv.kh() + 3 * b.conv.stride;
    for (int r = 0; r < 4; ++r) {
      Tensor<T> x({2, b.conv.in_channels(), h, h});
      rng.fill_normal(x.data, 1.0);
      Tensor<T> y1 = block_forward(b, make_input(x), RunMode::Eval).tensor();
      Tensor<T> y2 = conv2d_forward(x, eq);
      Tensor<T> y3 = conv2d_forward(x, ref);
      dev = std::max({dev, max_abs_diff(y1, y2), max_abs_diff(y2, y3)});
    }
    rep.blocks.push_back({b.id, dev});
    if (!(dev <= rep.tolerance)) rep.pass = false;
  });
  return rep;
}

}  // namespace

RunSummary run_train(const ResolvedConfig& cfg, const std::string& run_dir) {
  if (cfg.train.precision == "double") return run_train_typed<double>(cfg, run_dir);
  return run_train_typed<float>(cfg, run_dir);
}

void run_export(const std::string& ckpt_path, const std::string& out_path) {
  if (checkpoint_precision(ckpt_path) == "double")
    run_export_typed<double>(ckpt_path, out_path);
  else
    run_export_typed<float>(ckpt_path, out_path);
}

VerifyReport run_verify(const std::string& ckpt_path) {
  if (checkpoint_precision(ckpt_path) == "double") return run_verify_typed<double>(ckpt_path);
  return run_verify_typed<float>(ckpt_path);
}

std::string run_score_report(const std::string& run_dir) {
  return render_score_report(read_scores(RunPaths{run_dir}.scores()));
}

}  // namespace dyrep
