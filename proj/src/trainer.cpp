#include "dyrep/trainer.hpp"

#include <cmath>
#include <numbers>
#include <unordered_map>

namespace dyrep {

double cosine_lr(int epoch, int total_epochs, double lr0) {
  require(total_epochs >= 1, "cosine_lr: total epochs must be >= 1");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs)));
}

void TrainConfig::validate() const {
  require(epochs >= 1, "train.epochs must be >= 1");
  require(update_interval >= 1, "train.update_interval must be >= 1");
  require(batch_size >= 2, "train.batch_size must be >= 2 (BN needs batch statistics)");
  require(eval_batch_size >= 1, "train.eval_batch_size must be >= 1");
  require(precision == "single" || precision == "double",
          "train.precision must be 'single' or 'double'");
  grow.validate();
  dep.validate();
}

template <typename T>
std::vector<ParamRef<T>> collect_params(Model<T>& model) {
  std::vector<ParamRef<T>> out;
  model.visit_params(
      TensorVisitor<T>([&](const std::string& name, Tensor<T>& t) { out.push_back({name, &t}); }));
  return out;
}

template <typename T>
void Sgd<T>::zero_grad(const std::vector<ParamRef<T>>& params) {
  for (const auto& p : params) {
    p.tensor->alloc_grad();
    p.tensor->zero_grad();
  }
}

template <typename T>
void Sgd<T>::step(const std::vector<ParamRef<T>>& params, double lr) {
  for (const auto& p : params) {
    require(p.tensor->has_grad(), "sgd: parameter " + p.name + " has no gradient");
    auto& v = velocity[p.name];
    if (v.size() != p.tensor->data.size()) v.assign(p.tensor->data.size(), T(0));
    for (size_t i = 0; i < v.size(); ++i) {
      const double g = static_cast<double>(p.tensor->grad[i]) +
                       weight_decay * static_cast<double>(p.tensor->data[i]);
      const double vi = momentum * static_cast<double>(v[i]) + g;
      v[i] = static_cast<T>(vi);
      p.tensor->data[i] =
          static_cast<T>(static_cast<double>(p.tensor->data[i]) - lr * static_cast<double>(v[i]));
    }
  }
}

template <typename T>
void Sgd<T>::prune(const std::vector<ParamRef<T>>& params) {
  std::set<std::string> live;
  for (const auto& p : params) live.insert(p.name);
  for (auto it = velocity.begin(); it != velocity.end();) {
    if (!live.count(it->first))
      it = velocity.erase(it);
    else
      ++it;
  }
}

namespace {

// Weight (+bias) tensors of a rep target, which is either a block's original
// conv or a not-yet-expanded conv stage inside a branch.
template <typename T>
void find_stage_conv(DyRepBlock<T>& block, const std::string& id,
                     std::vector<const Tensor<T>*>& out) {
  for (auto& branch : block.branches)
    for (size_t j = 0; j < branch.stages.size(); ++j) {
      auto& stage = branch.stages[j];
      const std::string sid =
          block.id + "/" + branch_kind_name(branch.kind) + ".s" + std::to_string(j);
      if (stage.kind == StageKind::Conv && sid == id) {
        out.push_back(&stage.conv.weight);
        return;
      }
      if (stage.kind == StageKind::Block) {
        find_stage_conv(*stage.block, id, out);
        if (!out.empty()) return;
      }
    }
}

template <typename T>
std::vector<const Tensor<T>*> target_param_tensors(Model<T>& model, const std::string& id) {
  std::vector<const Tensor<T>*> out;
  if (DyRepBlock<T>* b = model.find_block(id)) {
    out.push_back(&b->conv.weight);
    if (b->conv.has_bias) out.push_back(&b->conv.bias);
    return out;
  }
  for (auto& site : model.sites) {
    find_stage_conv(site, id, out);
    if (!out.empty()) return out;
  }
  fail("saliency target not found in model: " + id);
}

template <typename T>
double tensor_double(const Tensor<T>& t) {
  return static_cast<double>(t.data[0]);
}

// Central-difference HVP of the training loss on one batch. Restores
// parameters, gradients and BN buffers bit-exactly afterwards.
template <typename T>
bool hvp_blocks(Model<T>& model, const std::vector<ParamRef<T>>& reg, const Tensor<T>& batch,
                const std::vector<int>& labels,
                std::unordered_map<const Tensor<T>*, std::vector<double>>& out) {
  std::vector<std::vector<T>> saved_vals, saved_grads;
  for (const auto& p : reg) {
    saved_vals.push_back(p.tensor->data);
    saved_grads.push_back(p.tensor->grad);
  }
  std::vector<Tensor<T>*> buffers;
  std::vector<std::vector<T>> saved_buffers;
  model.visit_buffers(TensorVisitor<T>([&](const std::string&, Tensor<T>& t) {
    buffers.push_back(&t);
    saved_buffers.push_back(t.data);
  }));

  size_t total = 0;
  for (const auto& p : reg) total += p.tensor->data.size();
  std::vector<double> theta(total), g(total);
  size_t off = 0;
  for (const auto& p : reg) {
    for (size_t i = 0; i < p.tensor->data.size(); ++i) {
      theta[off + i] = static_cast<double>(p.tensor->data[i]);
      g[off + i] = static_cast<double>(p.tensor->grad[i]);
    }
    off += p.tensor->data.size();
  }

  auto grad_fn = [&](const std::vector<double>& th, std::vector<double>& grad_out) {
    size_t o = 0;
    for (const auto& p : reg) {
      for (size_t i = 0; i < p.tensor->data.size(); ++i)
        p.tensor->data[i] = static_cast<T>(th[o + i]);
      p.tensor->zero_grad();
      o += p.tensor->data.size();
    }
    Value<T> logits = model.forward(batch, RunMode::Train);
    Value<T> loss = softmax_ce_op(logits, labels);
    backward(loss);
    grad_out.resize(th.size());
    o = 0;
    for (const auto& p : reg) {
      for (size_t i = 0; i < p.tensor->grad.size(); ++i)
        grad_out[o + i] = static_cast<double>(p.tensor->grad[i]);
      o += p.tensor->grad.size();
    }
  };

  std::vector<double> hg;
  const bool ok = central_hvp(grad_fn, theta, g, hg);

  for (size_t k = 0; k < reg.size(); ++k) {
    reg[k].tensor->data = saved_vals[k];
    reg[k].tensor->grad = saved_grads[k];
  }
  for (size_t k = 0; k < buffers.size(); ++k) buffers[k]->data = saved_buffers[k];

  if (!ok) return false;
  off = 0;
  for (const auto& p : reg) {
    out[p.tensor] = std::vector<double>(hg.begin() + static_cast<std::ptrdiff_t>(off),
                                        hg.begin() + static_cast<std::ptrdiff_t>(off) +
                                            static_cast<std::ptrdiff_t>(p.tensor->data.size()));
    off += p.tensor->data.size();
  }
  return true;
}

template <typename T>
void score_iteration(Model<T>& model, const std::vector<ParamRef<T>>& reg, SaliencyLedger& ledger,
                     const std::vector<RepTarget>& targets, const TrainConfig& cfg, int epoch,
                     int iter, const Tensor<T>& batch, const std::vector<int>& labels) {
  if (targets.empty()) {
    ledger.finish_iteration();
    return;
  }
  std::unordered_map<const Tensor<T>*, std::vector<double>> hvp;
  bool hvp_ok = false;
  if (ledger.tracks(Metric::Grasp)) hvp_ok = hvp_blocks(model, reg, batch, labels, hvp);

  SplitRng rand_base =
      SplitRng(cfg.seed).split("rand").split(static_cast<uint64_t>(epoch)).split(
          static_cast<uint64_t>(iter));
  for (const auto& t : targets) {
    auto tensors = target_param_tensors(model, t.id);
    if (ledger.tracks(Metric::Synflow))
      ledger.add(t.id, Metric::Synflow, score_synflow(tensors, cfg.synflow_abs));
    if (ledger.tracks(Metric::Snip)) ledger.add(t.id, Metric::Snip, score_snip(tensors));
    if (ledger.tracks(Metric::GradNorm))
      ledger.add(t.id, Metric::GradNorm, score_grad_norm(tensors));
    if (ledger.tracks(Metric::Random))
      ledger.add(t.id, Metric::Random, score_random(rand_base, t.id));
    if (ledger.tracks(Metric::Grasp)) {
      double s = 0.0;
      if (hvp_ok) {
        std::vector<std::vector<double>> blocks;
        for (const auto* ten : tensors) blocks.push_back(hvp.at(ten));
        s = score_grasp(tensors, blocks);
      }
      ledger.add(t.id, Metric::Grasp, s);
    }
  }
  ledger.finish_iteration();
}

template <typename T>
BatchSource<T> make_calib_source(const Dataset<T>& ds, const TrainConfig& cfg, int epoch) {
  auto perm = std::make_shared<std::vector<int64_t>>(
      SplitRng(cfg.seed).split("calib").split(static_cast<uint64_t>(epoch)).permutation(ds.size()));
  auto arng = std::make_shared<SplitRng>(
      SplitRng(cfg.seed).split("calibaug").split(static_cast<uint64_t>(epoch)));
  auto pos = std::make_shared<int64_t>(0);
  const int bs = cfg.batch_size;
  const bool aug = cfg.augment;
  return [&ds, perm, arng, pos, bs, aug]() -> std::optional<Tensor<T>> {
    if (*pos + bs > static_cast<int64_t>(perm->size())) return std::nullopt;
    Tensor<T> batch =
        gather_batch(ds, std::span<const int64_t>(perm->data() + *pos, static_cast<size_t>(bs)),
                     static_cast<std::vector<int>*>(nullptr));
    *pos += bs;
    if (aug) augment_batch(batch, *arng);
    return batch;
  };
}

}  // namespace

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const Dataset<T>& ds, int batch_size) {
  EvalResult<T> r;
  const int64_t n = ds.size();
  require(n > 0, "evaluate: empty dataset");
  r.predictions.resize(static_cast<size_t>(n));
  double loss_acc = 0.0;
  int64_t correct = 0;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t count = std::min<int64_t>(batch_size, n - start);
    idx.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    std::vector<int> labels;
    Tensor<T> batch = gather_batch(ds, idx, &labels);
    Tensor<T> logits = model.eval_logits(batch);
    CeForward<T> ce = softmax_ce_forward(logits, labels);
    loss_acc += ce.loss * static_cast<double>(count);
    const int64_t k = logits.shape[1];
    for (int64_t i = 0; i < count; ++i) {
      int best = 0;
      for (int64_t j = 1; j < k; ++j)
        if (logits.data[i * k + j] > logits.data[i * k + best]) best = static_cast<int>(j);
      r.predictions[static_cast<size_t>(start + i)] = best;
      if (best == labels[static_cast<size_t>(i)]) ++correct;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.mean_loss = loss_acc / static_cast<double>(n);
  return r;
}

template <typename T>
TrainResult train(TrainState<T>& state, const Dataset<T>& train_ds, const Dataset<T>& test_ds,
                  const TrainConfig& cfg, const TrainHooks<T>* hooks) {
  cfg.validate();
  require(train_ds.size() >= cfg.batch_size,
          "training dataset smaller than one batch (" + std::to_string(train_ds.size()) + " < " +
              std::to_string(cfg.batch_size) + ")");
  Model<T>& model = state.model;
  Sgd<T>& opt = state.opt;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  SaliencyLedger& ledger = state.ledger;

  TrainResult result;
  auto registry = collect_params(model);
  const int64_t batches = train_ds.size() / cfg.batch_size;

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
    SplitRng shuffle_rng =
        SplitRng(cfg.seed).split("shuffle").split(static_cast<uint64_t>(epoch));
    SplitRng aug_rng = SplitRng(cfg.seed).split("augment").split(static_cast<uint64_t>(epoch));
    std::vector<int64_t> perm = shuffle_rng.permutation(train_ds.size());

    double loss_sum = 0.0;
    std::vector<RepTarget> targets;
    for (int64_t it = 0; it < batches; ++it) {
      std::vector<int> labels;
      Tensor<T> batch = gather_batch(
          train_ds,
          std::span<const int64_t>(perm.data() + it * cfg.batch_size,
                                   static_cast<size_t>(cfg.batch_size)),
          &labels);
      if (cfg.augment) augment_batch(batch, aug_rng);

      if (cfg.rep_enabled) {
        targets = model.rep_targets(cfg.grow.max_rep_depth);
        ledger.ensure_targets(targets);
      }

      opt.zero_grad(registry);
      Value<T> logits = model.forward(batch, RunMode::Train);
      Value<T> loss = softmax_ce_op(logits, labels);
      const double lv = tensor_double(loss.tensor());
      if (!std::isfinite(lv)) {
        state.epoch = epoch;
        if (hooks && hooks->save) hooks->save(state, true);
        fail("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
             " iteration " + std::to_string(it));
      }
      backward(loss);
      if (cfg.rep_enabled)
        score_iteration(model, registry, ledger, targets, cfg, epoch, static_cast<int>(it), batch,
                        labels);
      opt.step(registry, lr);
      loss_sum += lv;
      result.step_losses.push_back(lv);
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(batches);

    if (cfg.rep_enabled && (epoch + 1) % cfg.update_interval == 0) {
      const int interval = (epoch + 1) / cfg.update_interval;
      auto chosen = ledger.select_target();
      for (const auto& r : ledger.rows())
        result.scores.push_back(
            {interval, r.id, metric_name(r.metric), r.score, chosen.value_or("")});

      if (chosen) {
        auto calib = make_calib_source(train_ds, cfg, epoch);
        ExpandInfo info = expand(model, *chosen, cfg.grow, calib, SplitRng(cfg.seed));
        result.events.push_back({epoch, "expand", info.id, info.kinds, {}});
        row.events.push_back("expand:" + info.id);
      }

      // DEP pass over every live block, after the REP step.
      std::vector<std::string> block_ids;
      model.visit_all_blocks([&](DyRepBlock<T>& b) {
        if (b.expanded()) block_ids.push_back(b.id);
      });
      for (const auto& id : block_ids) {
        DyRepBlock<T>* blk = model.find_block(id);
        if (!blk || !blk->expanded()) continue;  // removed along with a parent branch
        auto cut = dep_select(*blk, cfg.dep);
        if (cut.empty()) continue;
        StructEvent ev;
        ev.epoch = epoch;
        ev.event = "remove";
        ev.id = id;
        for (const auto& br : blk->branches) ev.importances.push_back(branch_importance(br));
        for (size_t j : cut) ev.kinds.push_back(branch_kind_name(blk->branches[j].kind));
        for (auto it2 = cut.rbegin(); it2 != cut.rend(); ++it2) remove_branch(*blk, *it2);
        for (const auto& k : ev.kinds) row.events.push_back("remove:" + id + ":" + k);
        result.events.push_back(std::move(ev));
      }

      registry = collect_params(model);
      opt.prune(registry);
      ledger.reset();
    }

    EvalResult<T> ev = evaluate(model, test_ds, cfg.eval_batch_size);
    row.eval_acc = ev.accuracy;
    row.eval_loss = ev.mean_loss;
    row.params = model.param_count();
    row.flops = model.flops_estimate();
    result.epochs.push_back(row);

    state.epoch = epoch + 1;
    if (hooks && hooks->save) hooks->save(state, false);
  }
  return result;
}

#define DYREP_INSTANTIATE_TRAINER(T)                                                        \
  template std::vector<ParamRef<T>> collect_params<T>(Model<T>&);                           \
  template class Sgd<T>;                                                                    \
  template EvalResult<T> evaluate<T>(Model<T>&, const Dataset<T>&, int);                    \
  template TrainResult train<T>(TrainState<T>&, const Dataset<T>&, const Dataset<T>&,       \
                                const TrainConfig&, const TrainHooks<T>*);

DYREP_INSTANTIATE_TRAINER(float)
DYREP_INSTANTIATE_TRAINER(double)

#undef DYREP_INSTANTIATE_TRAINER

}  // namespace dyrep
