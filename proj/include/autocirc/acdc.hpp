#pragma once

#include <optional>
#include <vector>

#include "autocirc/dataset.hpp"
#include "autocirc/graph.hpp"
#include "autocirc/metrics.hpp"
#include "autocirc/patchexec.hpp"

namespace autocirc {

struct AcdcConfig {
  double tau = 0.0;
  AblationMode ablation = AblationMode::kCorrupted;
  ParentPolicy policy = ParentPolicy::kDefault;
  RemovalMode removal = RemovalMode::kDirect;
  /// Unset means on for corrupted ablation and off for zero ablation.
  std::optional<bool> prune_disconnected;
  unsigned threads = 1;

  bool prunes() const { return prune_disconnected.value_or(ablation == AblationMode::kCorrupted); }
  void validate() const;
};

struct AcdcStep {
  std::size_t edge = 0;
  double f_before = 0.0;
  double f_after = 0.0;
  bool removed = false;
};

struct DiscoveryResult {
  Subgraph subgraph;
  std::vector<AcdcStep> log;
  double full_metric = 0.0;   // F(G)
  double final_metric = 0.0;  // F of the returned subgraph
  std::size_t evaluations = 0;
  std::size_t pruned_edges = 0;  // removed by prune_disconnected
};

DiscoveryResult acdc_run(const SubgraphEvaluator& evaluator, const AcdcConfig& config);
DiscoveryResult acdc_run(const Model& model, const CompGraph& graph, const TaskDataset& dataset,
                         const AcdcConfig& config);

/// Applies the logged decisions to the full graph (before any pruning).
Subgraph replay_log(const CompGraph& graph, const std::vector<AcdcStep>& log);

/// Keeps edges lying on a directed path from an embedding to the output.
Subgraph prune_disconnected(const Subgraph& subgraph);

std::vector<DiscoveryResult> tau_sweep(const SubgraphEvaluator& evaluator, const AcdcConfig& base,
                                       const std::vector<double>& taus);

/// `count` thresholds spaced evenly in log10 between lo and hi, inclusive.
std::vector<double> log_space(double lo, double hi, std::size_t count);

}  // namespace autocirc
