#include "sspt/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sspt/ndgrad/adam.hpp"

namespace sspt::pretrain {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kMaskStream = 0x4d41;
constexpr std::uint64_t kValidMaskStream = 0x564d;
constexpr std::size_t kEvalBatch = 256;

std::size_t argmax_row(const Tensor<float>& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  }
  return best;
}

MaskPlan rows_of(const MaskPlan& plan, std::span<const std::size_t> rows) {
  MaskPlan out;
  out.mask_rate = plan.mask_rate;
  out.seed = plan.seed;
  out.steps.reserve(rows.size());
  for (auto r : rows) out.steps.push_back(plan.steps.at(r));
  return out;
}

// Sum of squared errors of the masked head over one batch (masked steps only for MVP).
double masked_sse(const Tensor<float>& out, const PretrainBatch<float>& b, MaskedObjective obj, double* count) {
  double sse = 0.0;
  if (obj == MaskedObjective::MovingAverage) {
    for (std::size_t i = 0; i < b.map_targets.size(); ++i) {
      const double e = static_cast<double>(out[i]) - b.map_targets[i];
      sse += e * e;
    }
    *count += static_cast<double>(b.map_targets.size());
  } else {
    for (std::size_t i = 0; i < b.step_mask.size(); ++i) {
      if (b.step_mask[i] == 0.0f) continue;
      const double e = static_cast<double>(out[i]) - b.step_targets[i];
      sse += e * e;
      *count += 1.0;
    }
  }
  return sse;
}

struct Accumulator {
  double loss = 0.0, samples = 0.0;
  double scc_hits = 0.0, ssc_hits = 0.0;
  double sse = 0.0, masked_count = 0.0;
};

void record(std::vector<MetricRecord>& log, std::uint32_t epoch, const char* split, const PretrainConfig& cfg,
            const TaskMetrics& m, std::optional<double> loss) {
  if (loss) log.push_back({epoch, split, "loss", *loss});
  if (m.scc_accuracy) log.push_back({epoch, split, "scc_accuracy", *m.scc_accuracy});
  if (m.ssc_accuracy) log.push_back({epoch, split, "ssc_accuracy", *m.ssc_accuracy});
  if (m.masked_mse) log.push_back({epoch, split, std::string(masked_head(cfg.masked)) + "_mse", *m.masked_mse});
}

}  // namespace

void PretrainConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw TrainingError("loss coefficients must be non-negative");
  if (!scc() && !ssc() && !masked_task()) throw TrainingError("at least one pre-training task must be active");
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw TrainingError("mask rate must lie in (0, 1]");
  if (lr && !(*lr > 0.0)) throw TrainingError("learning rate must be positive");
}

double PretrainConfig::learning_rate() const {
  if (lr) return *lr;
  const int active = int(scc()) + int(ssc()) + int(masked_task());
  if (active == 1 && masked_task()) return 1e-4;
  return 1e-3;
}

std::vector<model::HeadSpec> required_heads(const data::FeatureTensor& ft, const PretrainConfig& cfg) {
  std::vector<model::HeadSpec> heads;
  if (cfg.scc()) heads.push_back({"scc", ft.stocks()});
  if (cfg.ssc()) heads.push_back({"ssc", ft.sectors()});
  if (cfg.masked_task()) {
    heads.push_back({masked_head(cfg.masked), cfg.masked == MaskedObjective::MovingAverage ? 1 : ft.lookback()});
  }
  return heads;
}

model::ModelConfig model_config_for(const data::FeatureTensor& ft) {
  model::ModelConfig mc;
  mc.input_width = ft.feature_count + 1;
  mc.lookback = ft.lookback();
  return mc;
}

std::size_t masked_step_count(double mask_rate, std::size_t lookback) {
  if (lookback == 0) throw TrainingError("mask plan: look-back must be positive");
  const auto k = static_cast<std::size_t>(std::llround(mask_rate * static_cast<double>(lookback)));
  return std::clamp<std::size_t>(k, 1, lookback);
}

MaskPlan make_mask_plan(std::size_t samples, std::size_t lookback, double mask_rate, std::uint64_t seed) {
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw TrainingError("mask rate must lie in (0, 1]");
  const std::size_t k = masked_step_count(mask_rate, lookback);
  MaskPlan plan;
  plan.mask_rate = mask_rate;
  plan.seed = seed;
  plan.steps.resize(samples);
  Rng rng(seed);
  std::vector<std::size_t> perm(lookback);
  for (auto& row : plan.steps) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k slots become a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.below(lookback - i);
      std::swap(perm[i], perm[j]);
    }
    row.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(row.begin(), row.end());
  }
  return plan;
}

double combined_loss(double scc, double ssc, double masked, double alpha, double beta, double gamma) {
  if (alpha < 0 || beta < 0 || gamma < 0) throw TrainingError("loss coefficients must be non-negative");
  if (alpha == 0 && beta == 0 && gamma == 0) throw TrainingError("combined_loss: all coefficients are zero");
  double total = 0.0;
  if (alpha > 0) total += alpha * scc;
  if (beta > 0) total += beta * ssc;
  if (gamma > 0) total += gamma * masked;
  return total;
}

TaskMetrics evaluate(const model::ParamSet<float>& params, const data::FeatureTensor& ft, data::Split split,
                     const PretrainConfig& cfg, std::uint64_t mask_seed) {
  const auto idx = ft.indices(split);
  TaskMetrics m;
  if (idx.empty()) return m;
  const MaskPlan plan = make_mask_plan(idx.size(), ft.lookback(), cfg.mask_rate, mask_seed);
  Accumulator acc;
  for (std::size_t lo = 0; lo < idx.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(idx.size(), lo + kEvalBatch);
    const std::span<const std::size_t> rows(idx.data() + lo, hi - lo);
    std::vector<std::size_t> local(hi - lo);
    std::iota(local.begin(), local.end(), lo);
    const auto sub = rows_of(plan, local);
    const auto b = make_batch<float>(ft, rows, cfg, sub);
    if (cfg.scc() || cfg.ssc()) {
      const auto pooled = model::represent(params, b.plain);
      std::vector<bool> none(params.size(), false);
      Graph<float> g(params.tensors, none);
      NodeId in = g.input(pooled);
      if (cfg.scc()) {
        const auto& logits = g.value(model::apply_head(g, params, in, "scc"));
        for (std::size_t r = 0; r < rows.size(); ++r) acc.scc_hits += argmax_row(logits, r) == b.stocks[r];
      }
      if (cfg.ssc()) {
        const auto& logits = g.value(model::apply_head(g, params, in, "ssc"));
        for (std::size_t r = 0; r < rows.size(); ++r) acc.ssc_hits += argmax_row(logits, r) == b.sectors[r];
      }
    }
    if (cfg.masked_task()) {
      const auto out = model::forward(params, b.masked, masked_head(cfg.masked));
      acc.sse += masked_sse(out, b, cfg.masked, &acc.masked_count);
    }
    acc.samples += static_cast<double>(rows.size());
  }
  if (cfg.scc()) m.scc_accuracy = acc.scc_hits / acc.samples;
  if (cfg.ssc()) m.ssc_accuracy = acc.ssc_hits / acc.samples;
  if (cfg.masked_task()) m.masked_mse = acc.sse / acc.masked_count;
  return m;
}

TrainRun run_pretraining(const data::FeatureTensor& ft, const PretrainConfig& cfg, model::ParamSet<float> params) {
  cfg.validate();
  for (const auto& h : required_heads(ft, cfg)) {
    if (!params.has_head(h.name)) throw TrainingError("pre-training needs a '" + h.name + "' head");
    if (params.head_dim(h.name) != h.out_dim) {
      throw TrainingError("head '" + h.name + "' has width " + std::to_string(params.head_dim(h.name)) +
                          ", task needs " + std::to_string(h.out_dim));
    }
  }
  auto train_idx = ft.indices(data::Split::Train);
  if (train_idx.empty()) throw TrainingError("training split has no samples");
  const std::size_t batch = cfg.batch_size ? cfg.batch_size : std::max<std::size_t>(1, ft.stocks());

  std::vector<std::size_t> all(params.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  ndgrad::AdamOptions opt;
  opt.lr = cfg.learning_rate();
  auto adam = ndgrad::make_adam<float>(params.tensors, all, opt);

  TrainRun run;
  run.selection_metric = cfg.scc() ? "scc_accuracy" : cfg.ssc() ? "ssc_accuracy"
                                                                 : std::string(masked_head(cfg.masked)) + "_mse";
  const bool lower_is_better = !cfg.scc() && !cfg.ssc();
  const std::uint64_t valid_mask_seed = derive_seed(cfg.seed, kValidMaskStream);
  const bool has_valid = ft.count(data::Split::Valid) > 0;
  run.best_params = params;

  Rng order_rng(derive_seed(cfg.seed, kShuffleStream));
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(train_idx);
    const MaskPlan plan =
        make_mask_plan(train_idx.size(), ft.lookback(), cfg.mask_rate, derive_seed(cfg.seed, kMaskStream + epoch));
    Accumulator acc;
    std::size_t step = 0;
    for (std::size_t lo = 0; lo < train_idx.size(); lo += batch, ++step) {
      const std::size_t hi = std::min(train_idx.size(), lo + batch);
      const std::span<const std::size_t> rows(train_idx.data() + lo, hi - lo);
      std::vector<std::size_t> local(hi - lo);
      std::iota(local.begin(), local.end(), lo);
      const auto b = make_batch<float>(ft, rows, cfg, rows_of(plan, local));

      Graph<float> g(params.tensors);
      std::vector<Tensor<float>> grads;
      TaskLosses<float> losses;
      try {
        losses = build_losses(g, params, b, cfg);
        grads = g.backward(*losses.total);
      } catch (const ndgrad::NonFiniteError& e) {
        throw TrainingError("pre-training diverged at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step) + ": " + e.what());
      }
      const double n = static_cast<double>(rows.size());
      acc.loss += g.value(*losses.total).item() * n;
      acc.samples += n;
      if (losses.scc_logits) {
        const auto& L = g.value(*losses.scc_logits);
        for (std::size_t r = 0; r < rows.size(); ++r) acc.scc_hits += argmax_row(L, r) == b.stocks[r];
      }
      if (losses.ssc_logits) {
        const auto& L = g.value(*losses.ssc_logits);
        for (std::size_t r = 0; r < rows.size(); ++r) acc.ssc_hits += argmax_row(L, r) == b.sectors[r];
      }
      if (losses.masked_out) acc.sse += masked_sse(g.value(*losses.masked_out), b, cfg.masked, &acc.masked_count);
      ndgrad::adam_step<float>(params.tensors, grads, adam);
      for (const auto& t : params.tensors) {
        if (!t.all_finite()) {
          throw TrainingError("pre-training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + ": non-finite parameter after update");
        }
      }
    }

    TaskMetrics train_m;
    if (cfg.scc()) train_m.scc_accuracy = acc.scc_hits / acc.samples;
    if (cfg.ssc()) train_m.ssc_accuracy = acc.ssc_hits / acc.samples;
    if (cfg.masked_task()) train_m.masked_mse = acc.sse / acc.masked_count;
    const auto ep = static_cast<std::uint32_t>(epoch);
    record(run.log, ep, "train", cfg, train_m, acc.loss / acc.samples);

    // Without a validation split the training metrics drive selection.
    const TaskMetrics sel = has_valid ? evaluate(params, ft, data::Split::Valid, cfg, valid_mask_seed) : train_m;
    if (has_valid) record(run.log, ep, "valid", cfg, sel, std::nullopt);
    const double metric = cfg.scc() ? *sel.scc_accuracy : cfg.ssc() ? *sel.ssc_accuracy : *sel.masked_mse;
    const bool better = run.best_epoch == 0 || (lower_is_better ? metric < run.best_metric : metric > run.best_metric);
    if (better) {
      run.best_epoch = epoch;
      run.best_metric = metric;
      run.best_params = params;
    }
  }
  return run;
}

}  // namespace sspt::pretrain
