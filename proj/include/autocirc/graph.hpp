#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "autocirc/model.hpp"
#include "autocirc/node_id.hpp"

namespace autocirc {

enum class Granularity { kHeadsMlps, kHeadsQkvMlps };

std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view s);  // "heads" | "heads-qkv"

/// Contribution of `src`'s output to input `slot` of `dst`.
struct Edge {
  NodeId src;
  NodeId dst;
  InputSlot slot = InputSlot::kIn;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Canonical "src->dst.slot" form, e.g. "a0.h0->m0.in".
std::string to_string(const Edge& e);
std::optional<Edge> parse_edge(std::string_view text);

enum class ParentPolicy { kDefault, kAscendingHeads };

std::string_view to_string(ParentPolicy p);
ParentPolicy parse_parent_policy(std::string_view s);

/// Computational DAG over embeddings, heads, MLPs and the output.
///
/// Connectivity convention: tok feeds every destination slot; pos feeds only
/// head q/k/v (or head "in") slots; each head slot also reads every
/// earlier-layer head and MLP; an MLP reads every head of its own and earlier
/// layers plus earlier MLPs; out reads every component. Edge indices follow
/// (destination forward order, slot q<k<v<in, default parent order).
class CompGraph {
 public:
  CompGraph(const ModelConfig& config, Granularity granularity);

  const ModelConfig& config() const { return config_; }
  Granularity granularity() const { return granularity_; }
  const std::vector<NodeId>& nodes() const { return nodes_; }  // forward topological order
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t edge_count() const { return edges_.size(); }
  const Edge& edge(std::size_t i) const { return edges_.at(i); }

  bool contains(const NodeId& node) const;
  std::vector<InputSlot> slots(const NodeId& dst) const;

  /// Edge indices into (dst, slot), in default parent order.
  const std::vector<std::size_t>& incoming(const NodeId& dst, InputSlot slot) const;
  /// Edge indices leaving `src`, ascending.
  std::vector<std::size_t> outgoing(const NodeId& src) const;

  std::optional<std::size_t> find_edge(const Edge& e) const;
  std::optional<std::size_t> find_edge(std::string_view text) const;

  /// FNV-1a digest of (config, granularity, edge list) as 16 hex digits.
  const std::string& fingerprint() const { return fingerprint_; }

 private:
  std::size_t site(const NodeId& dst, InputSlot slot) const;

  ModelConfig config_;
  Granularity granularity_;
  std::vector<NodeId> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> incoming_;  // by site
  std::string fingerprint_;
};

CompGraph build_graph(const ModelConfig& config, Granularity granularity);

/// Output first; every node precedes its parents.
std::vector<NodeId> reverse_topo(const CompGraph& graph);

/// Parents of every slot of `v`, slots in q,k,v,in order. Default policy:
/// later layers first, MLP before heads within a layer, higher head index
/// first, then pos, then tok. Ascending-heads flips the within-layer head
/// order only.
std::vector<std::pair<NodeId, InputSlot>> ordered_parents(const CompGraph& graph, const NodeId& v,
                                                          ParentPolicy policy);

/// Same order as ordered_parents, as edge indices.
std::vector<std::size_t> ordered_parent_edges(const CompGraph& graph, const NodeId& v,
                                              ParentPolicy policy);

/// Edge-inclusion mask over a graph; the graph must outlive it.
class Subgraph {
 public:
  explicit Subgraph(const CompGraph& graph, bool full = true)
      : graph_(&graph), included_(graph.edge_count(), full) {}

  static Subgraph full(const CompGraph& g) { return Subgraph(g, true); }
  static Subgraph empty(const CompGraph& g) { return Subgraph(g, false); }

  const CompGraph& graph() const { return *graph_; }
  bool contains(std::size_t edge) const { return included_.at(edge); }
  void set(std::size_t edge, bool on) { included_.at(edge) = on; }
  std::size_t edge_count() const;
  std::vector<std::size_t> edge_indices() const;
  const std::vector<bool>& mask() const { return included_; }

  /// Nodes touched by at least one included edge.
  std::vector<NodeId> nodes() const;

  friend bool operator==(const Subgraph& a, const Subgraph& b) {
    return a.graph_ == b.graph_ && a.included_ == b.included_;
  }

 private:
  const CompGraph* graph_;
  std::vector<bool> included_;
};

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace autocirc
