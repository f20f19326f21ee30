#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "autocirc/dataset.hpp"
#include "autocirc/graph.hpp"
#include "autocirc/model.hpp"

namespace autocirc {

enum class AblationMode { kCorrupted, kZero };

std::string_view to_string(AblationMode m);
AblationMode parse_ablation(std::string_view s);  // corrupted|zero

/// Forward cache of the unmodified model on every corrupted prompt, using the
/// dataset's positional overrides.
ActivationCache build_corrupt_cache(const Model& model, const TaskDataset& dataset);

/// Cache on a corrupted batch; throws a pairing error unless it matches the
/// clean batch shape.
ActivationCache build_corrupt_cache(const Model& model, const std::vector<TokenSeq>& clean,
                                    const std::vector<TokenSeq>& corrupted);

/// Residual-input assembly under an edge mask. Each slot reads, per incoming
/// edge, the in-progress clean contribution when the edge is kept and the
/// corrupted contribution (or nothing, in zero mode) when it is not. The
/// positional embedding is not an edge into MLPs or the output, so those slots
/// always add its clean value.
class PatchHooks : public ForwardHooks {
 public:
  /// `subgraph` null means every edge is kept. `corrupt` is required in
  /// corrupted mode and must outlive the tape.
  PatchHooks(const CompGraph& graph, const Subgraph* subgraph, AblationMode mode,
             const ExampleActivations* corrupt);

  num::Slot assemble(num::Tape& tape, const NodeId& dst, InputSlot slot) override;
  num::Slot on_output(num::Tape& tape, const NodeId& node, num::Slot contribution) override;

 protected:
  num::Slot corrupted_contribution(num::Tape& tape, const NodeId& node);
  const CompGraph& graph() const { return graph_; }
  AblationMode mode() const { return mode_; }
  const ExampleActivations* corrupt() const { return corrupt_; }

 private:
  const CompGraph& graph_;
  const Subgraph* subgraph_;
  AblationMode mode_;
  const ExampleActivations* corrupt_;
  std::vector<std::optional<num::Slot>> clean_;
  std::vector<std::optional<num::Slot>> dirty_;
  std::size_t seq_len_ = 0;
};

struct PatchedOutput {
  num::Tensor logits;  // [T, vocab]
};

PatchedOutput run_subgraph(const Model& model, const CompGraph& graph, const Subgraph& subgraph,
                           std::span<const Token> clean, AblationMode mode,
                           const ExampleActivations* corrupt);

/// Reusable evaluation context for F(H): holds the corrupted cache and the
/// reference outputs (the clean run of `reference`, or of `model` itself).
class SubgraphEvaluator {
 public:
  SubgraphEvaluator(const Model& model, const CompGraph& graph, const TaskDataset& dataset,
                    AblationMode mode, const Model* reference = nullptr, unsigned threads = 1);
  // Holds references to its inputs.
  SubgraphEvaluator(const Model&&, const CompGraph&, const TaskDataset&, AblationMode, const Model* = nullptr,
                    unsigned = 1) = delete;
  SubgraphEvaluator(const Model&, const CompGraph&&, const TaskDataset&, AblationMode, const Model* = nullptr,
                    unsigned = 1) = delete;
  SubgraphEvaluator(const Model&, const CompGraph&, const TaskDataset&&, AblationMode, const Model* = nullptr,
                    unsigned = 1) = delete;

  /// Mean metric over every (example, measured position) pair.
  double evaluate(const Subgraph& subgraph) const;

  /// Per-example logits of the patched run.
  std::vector<num::Tensor> outputs(const Subgraph& subgraph) const;

  const Model& model() const { return model_; }
  const CompGraph& graph() const { return graph_; }
  const TaskDataset& dataset() const { return dataset_; }
  AblationMode mode() const { return mode_; }
  const ActivationCache& corrupt_cache() const { return corrupt_; }
  const num::Tensor& reference_logits(std::size_t example) const { return reference_.at(example); }
  std::size_t evaluations() const { return evaluations_; }
  unsigned threads() const { return threads_; }

 private:
  const Model& model_;
  const CompGraph& graph_;
  const TaskDataset& dataset_;
  AblationMode mode_;
  unsigned threads_;
  ActivationCache corrupt_;
  std::vector<num::Tensor> reference_;
  std::size_t total_positions_ = 0;
  mutable std::size_t evaluations_ = 0;
};

double evaluate_subgraph(const Model& model, const CompGraph& graph, const Subgraph& subgraph,
                         const TaskDataset& dataset, AblationMode mode,
                         const Model* reference = nullptr);

/// Runs `body(i)` for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body);

}  // namespace autocirc
