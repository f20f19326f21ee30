#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autocirc/dataset.hpp"
#include "autocirc/graph.hpp"
#include "autocirc/patchexec.hpp"
#include "autocirc/tape.hpp"

namespace autocirc {

/// A maskable component: a head's q/k/v activation (slot q, k or v), or the
/// output of a head or MLP (slot in).
struct MaskUnit {
  NodeId node;
  InputSlot slot = InputSlot::kIn;

  bool is_output() const { return slot == InputSlot::kIn; }
  friend bool operator==(const MaskUnit&, const MaskUnit&) = default;
};

/// "a0.h1.q", "a0.h1" (output), "m0".
std::string to_string(const MaskUnit& u);

/// Canonical order: per layer, each head's q, k, v, then every head output,
/// then the MLP. q/k/v units appear only when `with_qkv` is set.
std::vector<MaskUnit> mask_units(const ModelConfig& config, bool with_qkv);

/// Default unit set for a graph: q/k/v units exactly at heads-qkv granularity.
std::vector<MaskUnit> mask_units(const CompGraph& graph);

/// Edges induced by a set of open units. An edge is kept when its source is
/// an embedding or an open output unit, and its destination is the output or
/// an open output unit whose receiving q/k/v unit (if masked separately) is
/// also open.
Subgraph induced_subgraph(const CompGraph& graph, const std::vector<MaskUnit>& units,
                          const std::vector<bool>& open);

/// Heads and MLPs whose output unit is open.
std::vector<NodeId> open_nodes(const std::vector<MaskUnit>& units, const std::vector<bool>& open);

struct NodeMask {
  std::vector<MaskUnit> units;
  std::vector<double> log_alpha;
  num::HardConcrete gate;
  std::vector<bool> rounded;  // filled by sp_finalize

  /// Test-time gate value clamp(sigmoid(alpha)(zeta - gamma) + gamma, 0, 1).
  double expectation(std::size_t unit) const;
};

struct SpConfig {
  double lambda = 1.0;
  std::size_t steps = 1000;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  double init_mean = 1.0;
  double init_std = 1.0;
  AblationMode ablation = AblationMode::kZero;
  unsigned threads = 1;

  void validate() const;
};

struct SpStepLog {
  double loss = 0.0;
  double metric = 0.0;
  double penalty = 0.0;
};

struct SpResult {
  NodeMask mask;
  std::vector<SpStepLog> history;
};

/// Expected-L0 penalty sum_j sigmoid(alpha_j - beta ln(-gamma / zeta)).
double expected_l0(const std::vector<double>& log_alpha, const num::HardConcrete& gate);

struct SpLoss {
  double loss = 0.0;
  double metric = 0.0;
  double penalty = 0.0;
  std::vector<double> grad;  // d loss / d log_alpha; empty when not requested
};

/// Loss of the gated model under fixed gate noise `u` (one value per unit,
/// shared by every example), optionally with its gradient.
SpLoss sp_loss(const SubgraphEvaluator& evaluator, const std::vector<MaskUnit>& units,
               const std::vector<double>& log_alpha, const std::vector<double>& u, double lambda,
               const num::HardConcrete& gate, bool with_grad);

SpResult sp_train(const SubgraphEvaluator& evaluator, const std::vector<MaskUnit>& units,
                  const SpConfig& config);

struct MaskSelection {
  std::vector<bool> open;
  std::vector<NodeId> nodes;
  Subgraph subgraph;
};

/// Rounds every gate at expectation >= 0.5.
MaskSelection sp_finalize(const CompGraph& graph, NodeMask& mask);

struct ImportanceTable {
  std::vector<MaskUnit> units;
  std::vector<double> scores;
  std::vector<std::uint32_t> layer;
};

/// Mean over examples of |(C(x) - C(x'))^T dF/dC(x)| per unit; zero ablation
/// drops the C(x') term. `corrupt_override`, when given, replaces the
/// evaluator's corrupted cache.
ImportanceTable hisp_scores(const SubgraphEvaluator& evaluator, const std::vector<MaskUnit>& units,
                            const ActivationCache* corrupt_override = nullptr);

/// Divides each layer's scores by that layer's Euclidean norm.
ImportanceTable hisp_layer_normalize(const ImportanceTable& table);

/// Units with the k largest scores, ties broken by canonical unit order.
std::vector<bool> top_k(const ImportanceTable& table, std::size_t k);

std::vector<MaskSelection> hisp_topk_sweep(const ImportanceTable& table, const CompGraph& graph,
                                           const std::vector<std::size_t>& ks);

/// Number of units with a nonzero score.
std::size_t nonzero_units(const ImportanceTable& table);

/// Gradients of the per-example metric with respect to every unit activation
/// on the clean run (used by HISP and by the gradient checks).
std::vector<num::Tensor> unit_gradients(const SubgraphEvaluator& evaluator,
                                        const std::vector<MaskUnit>& units, std::size_t example);

/// Per-example metric of the clean run with unit `which` replaced by `value`.
double metric_with_unit(const SubgraphEvaluator& evaluator, const std::vector<MaskUnit>& units,
                        std::size_t example, std::size_t which, const num::Tensor& value);

/// Clean-run activations of every unit for one example.
std::vector<num::Tensor> unit_activations(const ExampleActivations& acts, const ModelConfig& config,
                                          const std::vector<MaskUnit>& units);

}  // namespace autocirc
