#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autocirc/graph.hpp"
#include "autocirc/model.hpp"
#include "autocirc/patchexec.hpp"

namespace autocirc {

struct CanonicalCircuit {
  std::vector<std::string> edges;  // canonical edge strings
  std::string provenance;

  /// Throws an identifier error if any edge is missing from `graph`.
  Subgraph to_subgraph(const CompGraph& graph) const;
  /// Heads and MLPs touched by the circuit.
  std::vector<NodeId> nodes(const CompGraph& graph) const;
};

enum class ConfusionLevel { kEdge, kNode };

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double tpr() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double fpr() const { return fp + tn == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(fp + tn); }
};

Confusion edge_confusion(const Subgraph& h, const Subgraph& canonical, ConfusionLevel level);
/// Node-level confusion for an explicit node set (as chosen by SP or HISP).
Confusion node_confusion(const CompGraph& graph, const std::vector<NodeId>& chosen,
                         const std::vector<NodeId>& canonical);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double param = 0.0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocCurve {
  std::vector<RocPoint> points;
  bool pareto = false;
};

/// Keeps points no other point dominates (lower or equal FPR with higher or
/// equal TPR, strictly better in one), merges duplicates, sorts by FPR and
/// appends the (0,0) and (1,1) endpoints.
RocCurve pareto_roc(std::vector<RocPoint> points);

RocCurve roc_curve(const std::vector<Subgraph>& results, const Subgraph& canonical, ConfusionLevel level,
                   const std::vector<double>& params = {});

/// Hold-left staircase: sum of (fpr[i+1] - fpr[i]) * tpr[i].
double pessimistic_auc(const RocCurve& curve);
double trapezoid_auc(const RocCurve& curve);

struct SparsityPoint {
  std::size_t edges = 0;
  double metric = 0.0;
  friend bool operator==(const SparsityPoint&, const SparsityPoint&) = default;
};

std::vector<SparsityPoint> sparsity_curve(const SubgraphEvaluator& test, const std::vector<Subgraph>& results);

/// Points not dominated by one with no more edges and no larger metric,
/// ascending in edges; the metric strictly decreases along the frontier.
std::vector<SparsityPoint> sparsity_frontier(std::vector<SparsityPoint> points);

/// Step function f(e) = min metric over frontier points with <= e edges;
/// infinite below the smallest frontier edge count.
double frontier_at(const std::vector<SparsityPoint>& frontier, std::size_t edges);

struct MatchedPoint {
  std::size_t edges = 0;
  double a = 0.0;
  double b = 0.0;
};

/// Both step functions at every frontier edge count of either curve where
/// both are finite.
std::vector<MatchedPoint> matched_frontiers(const std::vector<SparsityPoint>& a,
                                            const std::vector<SparsityPoint>& b);

/// Permutes the head axis of every layer's Q, K and V weights (one
/// permutation per matrix, applied to W and b together) and the entries of
/// each MLP input bias.
Model reset_network(const Model& model, std::uint64_t seed);

}  // namespace autocirc
