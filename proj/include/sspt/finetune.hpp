#pragma once

// Stock-selection fine-tuning: squared-error regression on next-day returns
// plus a pairwise ranking hinge over every ordered pair of stocks in a day.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sspt/backtest.hpp"
#include "sspt/market_data.hpp"
#include "sspt/model.hpp"
#include "sspt/ndgrad/graph.hpp"
#include "sspt/pretrain.hpp"

namespace sspt::finetune {

using ndgrad::Graph;
using ndgrad::NodeId;
using ndgrad::Shape;
using ndgrad::Tensor;

class FinetuneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FreezeStrategy { None, Embedding, EmbeddingAttention, FullExtractor };

const char* strategy_name(FreezeStrategy s);
/// Accepts none, embedding, embedding+attention, full-extractor.
FreezeStrategy parse_strategy(const std::string& name);
std::vector<std::string> frozen_groups(FreezeStrategy s);

struct FinetuneConfig {
  double epsilon = 1.0;
  double lr = 1e-3;
  FreezeStrategy strategy = FreezeStrategy::None;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  pretrain::FeatureMode features = pretrain::FeatureMode::AllFeatures;
  backtest::BacktestConfig backtest;  // drives the validation Sharpe ratio

  void validate() const;
};

/// Regression and ranking terms of the selection loss, reported separately.
struct SelectionLossParts {
  double regression = 0.0;
  double ranking = 0.0;  // unweighted pair sum
  double total(double epsilon) const { return regression + epsilon * ranking; }
};

/// Value form; O(N^2) over ordered pairs.
SelectionLossParts selection_loss_parts(std::span<const double> predicted, std::span<const double> actual);
double selection_loss(std::span<const double> predicted, std::span<const double> actual, double epsilon);

/// Graph form. `predicted` is [N] or [N, 1].
template <typename T>
NodeId selection_loss(Graph<T>& g, NodeId predicted, std::span<const T> actual, T epsilon) {
  const auto& P = g.value(predicted);
  const std::size_t n = actual.size();
  if (P.size() != n) {
    throw FinetuneError("selection_loss: " + std::to_string(P.size()) + " predictions for " + std::to_string(n) +
                        " returns");
  }
  NodeId pred = g.reshape(predicted, Shape{n});
  Tensor<T> r(Shape{n}, std::vector<T>(actual.begin(), actual.end()));
  Tensor<T> neg_dr(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) neg_dr[i * n + j] = actual[j] - actual[i];
  }
  NodeId regression = g.sum_all(g.square(g.sub(pred, g.input(std::move(r)))));
  NodeId hinge = g.relu(g.mul(g.pairwise_diff(pred), g.input(std::move(neg_dr))));
  return g.add(regression, g.scale(g.sum_all(hinge), epsilon));
}

/// Parameter ids the optimizer updates and the ones it never sees.
struct Partition {
  std::vector<std::size_t> frozen;
  std::vector<std::size_t> tunable;
  std::size_t frozen_count = 0;   // scalar parameters
  std::size_t tunable_count = 0;
};

/// Requires the select head; rejects groups outside the known set.
Partition partition_params(const model::ParamSet<float>& params, FreezeStrategy strategy);

/// Drops every existing head and appends a fresh single-output `select` head.
model::ParamSet<float> with_select_head(model::ParamSet<float> params, std::uint64_t seed);

/// Model predictions for each day of a split, in stock order.
std::vector<std::vector<double>> predict_split(const model::ParamSet<float>& params, const data::FeatureTensor& ft,
                                               data::Split split, pretrain::FeatureMode features);

struct FinetuneRun {
  pretrain::TrainRun run;  // selection metric: validation Sharpe ratio
  Partition partition;
};

/// One optimizer step per trading day in chronological order.
FinetuneRun run_finetuning(const data::FeatureTensor& ft, const FinetuneConfig& cfg, model::ParamSet<float> params);

}  // namespace sspt::finetune
