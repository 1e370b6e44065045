#include "sspt/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sspt/ndgrad/adam.hpp"

namespace sspt::finetune {

namespace {

constexpr std::uint64_t kSelectHeadStream = 0x53454c;

}  // namespace

const char* strategy_name(FreezeStrategy s) {
  switch (s) {
    case FreezeStrategy::None: return "none";
    case FreezeStrategy::Embedding: return "embedding";
    case FreezeStrategy::EmbeddingAttention: return "embedding+attention";
    case FreezeStrategy::FullExtractor: return "full-extractor";
  }
  return "?";
}

FreezeStrategy parse_strategy(const std::string& name) {
  for (auto s : {FreezeStrategy::None, FreezeStrategy::Embedding, FreezeStrategy::EmbeddingAttention,
                 FreezeStrategy::FullExtractor}) {
    if (name == strategy_name(s)) return s;
  }
  throw FinetuneError("unknown freezing strategy '" + name +
                      "' (expected none, embedding, embedding+attention, full-extractor)");
}

std::vector<std::string> frozen_groups(FreezeStrategy s) {
  switch (s) {
    case FreezeStrategy::None: return {};
    case FreezeStrategy::Embedding: return {"embedding"};
    case FreezeStrategy::EmbeddingAttention: return {"embedding", "attention-1", "attention-2"};
    case FreezeStrategy::FullExtractor: return model::trunk_groups();
  }
  return {};
}

void FinetuneConfig::validate() const {
  if (!(epsilon > 0.0)) throw FinetuneError("epsilon must be positive");
  if (!(lr > 0.0)) throw FinetuneError("learning rate must be positive");
  if (backtest.k == 0) throw FinetuneError("k must be at least 1");
}

SelectionLossParts selection_loss_parts(std::span<const double> p, std::span<const double> r) {
  if (p.size() != r.size()) {
    throw FinetuneError("selection_loss: " + std::to_string(p.size()) + " predictions for " +
                        std::to_string(r.size()) + " returns");
  }
  SelectionLossParts out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.regression += (p[i] - r[i]) * (p[i] - r[i]);
    for (std::size_t j = 0; j < p.size(); ++j) out.ranking += std::max(0.0, -(p[i] - p[j]) * (r[i] - r[j]));
  }
  return out;
}

double selection_loss(std::span<const double> p, std::span<const double> r, double epsilon) {
  return selection_loss_parts(p, r).total(epsilon);
}

Partition partition_params(const model::ParamSet<float>& params, FreezeStrategy strategy) {
  if (!params.has_head("select")) throw FinetuneError("fine-tuning needs a 'select' head");
  const auto trunk = model::trunk_groups();
  const auto frozen = frozen_groups(strategy);
  Partition out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params.groups[i];
    if (std::find(trunk.begin(), trunk.end(), g) == trunk.end() && !model::is_head_group(g)) {
      throw FinetuneError("parameter '" + params.names[i] + "' has unknown group '" + g + "'");
    }
    if (std::find(frozen.begin(), frozen.end(), g) != frozen.end()) {
      out.frozen.push_back(i);
      out.frozen_count += params.tensors[i].size();
    } else {
      out.tunable.push_back(i);
      out.tunable_count += params.tensors[i].size();
    }
  }
  return out;
}

model::ParamSet<float> with_select_head(model::ParamSet<float> params, std::uint64_t seed) {
  model::ParamSet<float> out;
  out.config = params.config;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (model::is_head_group(params.groups[i])) continue;
    out.add(params.groups[i], params.names[i].substr(params.groups[i].size() + 1), std::move(params.tensors[i]));
  }
  model::add_head(out, {"select", 1}, derive_seed(seed, kSelectHeadStream));
  return out;
}

std::vector<std::vector<double>> predict_split(const model::ParamSet<float>& params, const data::FeatureTensor& ft,
                                               data::Split split, pretrain::FeatureMode features) {
  std::vector<std::vector<double>> out;
  for (const auto& day : ft.day_batches(split)) {
    const auto y = model::forward(params, pretrain::make_inputs<float>(ft, day.samples, features), "select");
    out.emplace_back(y.data().begin(), y.data().end());
  }
  return out;
}

FinetuneRun run_finetuning(const data::FeatureTensor& ft, const FinetuneConfig& cfg, model::ParamSet<float> params) {
  cfg.validate();
  if (params.head_dim("select") != 1) throw FinetuneError("select head must have one output");
  FinetuneRun result;
  result.partition = partition_params(params, cfg.strategy);
  if (result.partition.tunable.empty()) throw FinetuneError("no tunable parameters");

  std::vector<bool> trainable(params.size(), false);
  for (auto i : result.partition.tunable) trainable[i] = true;
  ndgrad::AdamOptions opt;
  opt.lr = cfg.lr;
  auto adam = ndgrad::make_adam<float>(params.tensors, result.partition.tunable, opt);

  const auto days = ft.day_batches(data::Split::Train);
  if (days.empty()) throw FinetuneError("training split has no samples");
  const auto valid = backtest::split_returns(ft, data::Split::Valid);

  auto& run = result.run;
  run.selection_metric = "sharpe";
  run.best_params = params;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < days.size(); ++step) {
      const auto& day = days[step];
      std::vector<float> actual;
      for (auto s : day.samples) actual.push_back(ft.samples[s].label);
      Graph<float> g(params.tensors, trainable);
      std::vector<Tensor<float>> grads;
      try {
        NodeId pooled = model::encode(g, params, pretrain::make_inputs<float>(ft, day.samples, cfg.features));
        NodeId loss = selection_loss<float>(g, model::apply_head(g, params, pooled, "select"), actual,
                                            static_cast<float>(cfg.epsilon));
        loss_sum += g.value(loss).item();
        grads = g.backward(loss);
      } catch (const ndgrad::NonFiniteError& e) {
        throw FinetuneError("fine-tuning diverged at epoch " + std::to_string(epoch) + ", day " +
                            ft.dates[day.day] + ": " + e.what());
      }
      ndgrad::adam_step<float>(params.tensors, grads, adam);
    }
    const auto ep = static_cast<std::uint32_t>(epoch);
    run.log.push_back({ep, "train", "loss", loss_sum / static_cast<double>(days.size())});

    double metric = -std::numeric_limits<double>::infinity();
    if (!valid.returns.empty()) {
      const auto preds = predict_split(params, ft, data::Split::Valid, cfg.features);
      try {
        metric = backtest::run_backtest(preds, valid.returns, cfg.backtest).sharpe;
      } catch (const backtest::BacktestError&) {
        // Degenerate validation returns leave the metric at -inf; this epoch is never preferred.
      }
      run.log.push_back({ep, "valid", "sharpe", metric});
    }
    if (run.best_epoch == 0 || metric > run.best_metric) {
      run.best_epoch = epoch;
      run.best_metric = metric;
      run.best_params = params;
    }
  }
  return result;
}

}  // namespace sspt::finetune
