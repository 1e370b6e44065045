#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sspt/model.hpp"
#include "sspt/ndgrad/adam.hpp"

namespace sspt {

/// One `epoch,split,metric,value` row of a training log.
struct MetricRecord {
  std::uint32_t epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

void write_metric_csv(const std::vector<MetricRecord>& log, const std::filesystem::path& file);
std::vector<MetricRecord> read_metric_csv(const std::filesystem::path& file);

/// Binary layout: magic `SSPT`, u32 version, dataset digest, model config,
/// then every parameter as (u32 name length, name, u32 rank, u32 dims...,
/// little-endian f32 values), optional Adam state, and the metric log.
struct Checkpoint {
  std::string dataset_digest;
  model::ParamSet<float> params;
  std::optional<ndgrad::AdamState<float>> optimizer;
  std::vector<MetricRecord> log;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace sspt
