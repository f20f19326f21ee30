#pragma once

#include <string>
#include <vector>

#include "autocirc/metrics.hpp"
#include "autocirc/model.hpp"

namespace autocirc {

struct TaskExample {
  TokenSeq clean;
  TokenSeq corrupted;
  /// Positional-embedding rows used for the corrupted run; empty means 0..T-1.
  std::vector<std::size_t> corrupted_pos;
  ExampleTargets targets;
};

/// Paired clean/corrupted prompts with measured positions and a metric.
struct TaskDataset {
  std::string task;
  MetricKind metric = MetricKind::kKl;
  std::vector<TaskExample> examples;

  std::size_t size() const { return examples.size(); }

  /// Shape and range checks against a model config; throws pairing, vocab,
  /// context or spec errors.
  void validate(const ModelConfig& config) const;
};

}  // namespace autocirc
