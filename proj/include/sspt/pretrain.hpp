#pragma once

// Pre-training objectives: stock code classification, stock sector
// classification, masked moving-average prediction, their weighted sum, and
// the masked-value baseline. Loss builders are templates so the gradient
// checks can run them in double precision.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sspt/checkpoint.hpp"
#include "sspt/market_data.hpp"
#include "sspt/model.hpp"
#include "sspt/ndgrad/graph.hpp"
#include "sspt/rng.hpp"

namespace sspt::pretrain {

using ndgrad::Graph;
using ndgrad::NodeId;
using ndgrad::Shape;
using ndgrad::Tensor;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FeatureMode { AllFeatures, CloseOnly };
/// Which reconstruction target the masked task uses.
enum class MaskedObjective { MovingAverage, MaskedValue };

struct PretrainConfig {
  double alpha = 1.0;  // stock code classification
  double beta = 0.0;   // sector classification
  double gamma = 0.0;  // masked prediction
  std::optional<double> lr;  // unset: per-task default
  double mask_rate = 0.3;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  FeatureMode features = FeatureMode::AllFeatures;
  MaskedObjective masked = MaskedObjective::MovingAverage;
  std::size_t batch_size = 0;  // 0: number of stocks

  bool scc() const { return alpha > 0; }
  bool ssc() const { return beta > 0; }
  bool masked_task() const { return gamma > 0; }
  void validate() const;
  /// 1e-3 for classification tasks and any combination, 1e-4 for a lone masked task.
  double learning_rate() const;
};

/// Head name carrying the masked objective.
inline const char* masked_head(MaskedObjective m) { return m == MaskedObjective::MovingAverage ? "map" : "mvp"; }

/// Heads the active tasks need, sized for `ft`.
std::vector<model::HeadSpec> required_heads(const data::FeatureTensor& ft, const PretrainConfig& cfg);

/// Model config matching the dataset's window layout (features + mask indicator).
model::ModelConfig model_config_for(const data::FeatureTensor& ft);

/// Masked time steps per sample; each row holds distinct sorted indices.
struct MaskPlan {
  std::vector<std::vector<std::size_t>> steps;
  double mask_rate = 0.0;
  std::uint64_t seed = 0;
};

/// round(mask_rate * lookback), at least 1 and at most lookback.
std::size_t masked_step_count(double mask_rate, std::size_t lookback);

MaskPlan make_mask_plan(std::size_t samples, std::size_t lookback, double mask_rate, std::uint64_t seed);

/// Stacks the selected windows into [batch, lookback, features + 1]; the last
/// channel is the mask indicator. Steps listed in `plan` (row r for sample r
/// of the batch) have every feature zeroed and the indicator set to 1.
/// CloseOnly zeroes every feature column except close.
template <typename T>
Tensor<T> make_inputs(const data::FeatureTensor& ft, std::span<const std::size_t> samples, FeatureMode mode,
                      const MaskPlan* plan = nullptr) {
  const std::size_t T_ = ft.lookback(), M = ft.feature_count, W = M + 1;
  Tensor<T> out(Shape{samples.size(), T_, W});
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto win = ft.window(samples[b]);
    for (std::size_t t = 0; t < T_; ++t) {
      for (std::size_t c = 0; c < M; ++c) {
        const bool keep = mode == FeatureMode::AllFeatures || c == ft.close_column;
        out[(b * T_ + t) * W + c] = keep ? static_cast<T>(win[t * M + c]) : T(0);
      }
    }
    if (plan) {
      for (auto t : plan->steps.at(b)) {
        for (std::size_t c = 0; c < M; ++c) out[(b * T_ + t) * W + c] = T(0);
        out[(b * T_ + t) * W + M] = T(1);
      }
    }
  }
  return out;
}

/// Masks [batch, lookback, M] windows into [batch, lookback, M + 1].
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& windows, const MaskPlan& plan) {
  if (windows.rank() != 3 || plan.steps.size() != windows.dim(0)) {
    throw ndgrad::ShapeError("apply_mask: plan rows " + std::to_string(plan.steps.size()) + " for windows " +
                             ndgrad::to_string(windows.shape()));
  }
  const std::size_t B = windows.dim(0), T_ = windows.dim(1), M = windows.dim(2), W = M + 1;
  Tensor<T> out(Shape{B, T_, W});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T_; ++t) {
      for (std::size_t c = 0; c < M; ++c) out[(b * T_ + t) * W + c] = windows[(b * T_ + t) * M + c];
    }
    for (auto t : plan.steps[b]) {
      if (t >= T_) throw ndgrad::ShapeError("apply_mask: step " + std::to_string(t) + " outside window");
      for (std::size_t c = 0; c < M; ++c) out[(b * T_ + t) * W + c] = T(0);
      out[(b * T_ + t) * W + M] = T(1);
    }
  }
  return out;
}

/// Mean of a window's (normalized) closing prices.
template <typename T>
T map_target(std::span<const T> closes) {
  T s = 0;
  for (auto v : closes) s += v;
  return s / static_cast<T>(closes.size());
}

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
NodeId cross_entropy(Graph<T>& g, NodeId logits, std::span<const std::size_t> labels) {
  const auto& L = g.value(logits);
  if (L.rank() != 2 || L.dim(0) != labels.size()) {
    throw ndgrad::ShapeError("cross_entropy: logits " + ndgrad::to_string(L.shape()) + " for " +
                             std::to_string(labels.size()) + " labels");
  }
  for (auto y : labels) {
    if (y >= L.dim(1)) {
      throw ndgrad::ShapeError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                               std::to_string(L.dim(1)) + " classes");
    }
  }
  return g.scale(g.mean_all(g.pick(g.log_softmax(logits), labels)), T(-1));
}

template <typename T>
NodeId scc_loss(Graph<T>& g, NodeId logits, std::span<const std::size_t> stock_index) {
  return cross_entropy(g, logits, stock_index);
}

template <typename T>
NodeId ssc_loss(Graph<T>& g, NodeId logits, std::span<const std::size_t> sector_index) {
  return cross_entropy(g, logits, sector_index);
}

/// Mean squared error between per-sample predictions ([batch] or [batch, 1]) and targets.
template <typename T>
NodeId map_loss(Graph<T>& g, NodeId predictions, const Tensor<T>& targets) {
  const auto& P = g.value(predictions);
  if (P.size() != targets.size()) {
    throw ndgrad::ShapeError("map_loss: " + std::to_string(P.size()) + " predictions for " +
                             std::to_string(targets.size()) + " targets");
  }
  NodeId flat = g.reshape(predictions, Shape{P.size()});
  Tensor<T> t = targets;
  t.reshape(Shape{targets.size()});
  return g.mean_all(g.square(g.sub(flat, g.input(std::move(t)))));
}

/// Mean squared error over masked steps only. predictions/targets/mask are [batch, lookback].
template <typename T>
NodeId mvp_loss(Graph<T>& g, NodeId predictions, const Tensor<T>& targets, const Tensor<T>& mask) {
  const auto& P = g.value(predictions);
  if (P.shape() != targets.shape() || P.shape() != mask.shape()) {
    throw ndgrad::ShapeError("mvp_loss: predictions " + ndgrad::to_string(P.shape()) + ", targets " +
                             ndgrad::to_string(targets.shape()) + ", mask " + ndgrad::to_string(mask.shape()));
  }
  T count = 0;
  for (auto v : mask.data()) count += v;
  if (count <= T(0)) throw ndgrad::ShapeError("mvp_loss: no masked steps");
  NodeId err = g.square(g.sub(predictions, g.input(targets)));
  return g.scale(g.sum_all(g.mul(err, g.input(mask))), T(1) / count);
}

/// alpha * scc + beta * ssc + gamma * masked over the active terms.
template <typename T>
NodeId combined_loss(Graph<T>& g, std::optional<NodeId> scc, std::optional<NodeId> ssc, std::optional<NodeId> masked,
                     double alpha, double beta, double gamma) {
  if (alpha < 0 || beta < 0 || gamma < 0) throw TrainingError("loss coefficients must be non-negative");
  std::optional<NodeId> total;
  auto accumulate = [&](std::optional<NodeId> term, double coeff, const char* name) {
    if (coeff == 0.0) return;
    if (!term) throw TrainingError(std::string("combined_loss: ") + name + " is active but has no loss term");
    NodeId scaled = g.scale(*term, static_cast<T>(coeff));
    total = total ? g.add(*total, scaled) : scaled;
  };
  accumulate(scc, alpha, "scc");
  accumulate(ssc, beta, "ssc");
  accumulate(masked, gamma, "masked task");
  if (!total) throw TrainingError("combined_loss: all coefficients are zero");
  return *total;
}

/// Scalar form of the weighted combination.
double combined_loss(double scc, double ssc, double masked, double alpha, double beta, double gamma);

/// Batch-level quantities for one set of samples.
template <typename T>
struct PretrainBatch {
  Tensor<T> plain;                  // unmasked inputs
  Tensor<T> masked;                 // inputs with the mask plan applied
  std::vector<std::size_t> stocks;  // scc labels
  std::vector<std::size_t> sectors; // ssc labels
  Tensor<T> map_targets;            // [batch]
  Tensor<T> step_targets;           // [batch, lookback] normalized close
  Tensor<T> step_mask;              // [batch, lookback]
};

template <typename T>
PretrainBatch<T> make_batch(const data::FeatureTensor& ft, std::span<const std::size_t> samples,
                            const PretrainConfig& cfg, const MaskPlan& plan) {
  PretrainBatch<T> b;
  const std::size_t T_ = ft.lookback(), M = ft.feature_count;
  if (cfg.scc() || cfg.ssc()) b.plain = make_inputs<T>(ft, samples, cfg.features);
  if (cfg.masked_task()) b.masked = make_inputs<T>(ft, samples, cfg.features, &plan);
  b.map_targets = Tensor<T>(Shape{samples.size()});
  b.step_targets = Tensor<T>(Shape{samples.size(), T_});
  b.step_mask = Tensor<T>(Shape{samples.size(), T_});
  std::vector<T> closes(T_);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = ft.samples[samples[i]];
    b.stocks.push_back(s.stock);
    b.sectors.push_back(ft.sector_of_stock[s.stock]);
    const auto win = ft.window(samples[i]);
    for (std::size_t t = 0; t < T_; ++t) {
      closes[t] = static_cast<T>(win[t * M + ft.close_column]);
      b.step_targets[i * T_ + t] = closes[t];
    }
    b.map_targets[i] = map_target<T>(closes);
    if (cfg.masked_task()) {
      for (auto t : plan.steps.at(i)) b.step_mask[i * T_ + t] = T(1);
    }
  }
  return b;
}

/// Per-task loss nodes for one batch.
template <typename T>
struct TaskLosses {
  std::optional<NodeId> scc, ssc, masked, total;
  std::optional<NodeId> scc_logits, ssc_logits, masked_out;
};

/// Builds every active task on `g`. Classification tasks see the unmasked
/// window; the masked task sees the masked one.
template <typename T>
TaskLosses<T> build_losses(Graph<T>& g, const model::ParamSet<T>& params, const PretrainBatch<T>& b,
                           const PretrainConfig& cfg) {
  TaskLosses<T> out;
  if (cfg.scc() || cfg.ssc()) {
    NodeId pooled = model::encode(g, params, b.plain);
    if (cfg.scc()) {
      out.scc_logits = model::apply_head(g, params, pooled, "scc");
      out.scc = scc_loss(g, *out.scc_logits, b.stocks);
    }
    if (cfg.ssc()) {
      out.ssc_logits = model::apply_head(g, params, pooled, "ssc");
      out.ssc = ssc_loss(g, *out.ssc_logits, b.sectors);
    }
  }
  if (cfg.masked_task()) {
    NodeId pooled = model::encode(g, params, b.masked);
    out.masked_out = model::apply_head(g, params, pooled, masked_head(cfg.masked));
    out.masked = cfg.masked == MaskedObjective::MovingAverage
                     ? map_loss(g, *out.masked_out, b.map_targets)
                     : mvp_loss(g, *out.masked_out, b.step_targets, b.step_mask);
  }
  out.total = combined_loss(g, out.scc, out.ssc, out.masked, cfg.alpha, cfg.beta, cfg.gamma);
  return out;
}

/// Validation metrics of one split.
struct TaskMetrics {
  std::optional<double> scc_accuracy, ssc_accuracy, masked_mse;
};

/// Evaluates the active tasks on `split` with a fixed mask plan derived from `mask_seed`.
TaskMetrics evaluate(const model::ParamSet<float>& params, const data::FeatureTensor& ft, data::Split split,
                     const PretrainConfig& cfg, std::uint64_t mask_seed);

/// Configuration, per-epoch log, and best-epoch parameters of one training job.
struct TrainRun {
  std::vector<MetricRecord> log;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  std::string selection_metric;
  double best_metric = 0.0;
  model::ParamSet<float> best_params;
};

/// Multi-task pre-training with validation-based epoch selection: scc accuracy
/// if active, else ssc accuracy, else lowest masked-task MSE.
TrainRun run_pretraining(const data::FeatureTensor& ft, const PretrainConfig& cfg, model::ParamSet<float> params);

}  // namespace sspt::pretrain
