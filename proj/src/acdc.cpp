#include "autocirc/acdc.hpp"

#include <cmath>

#include "autocirc/error.hpp"

namespace autocirc {

void AcdcConfig::validate() const {
  require(std::isfinite(tau) && tau > 0.0, ErrorKind::kUsage, "tau must be positive");
}

DiscoveryResult acdc_run(const SubgraphEvaluator& evaluator, const AcdcConfig& config) {
  config.validate();
  require(config.ablation == evaluator.mode(), ErrorKind::kUsage, "evaluator ablation mode differs from config");
  const CompGraph& graph = evaluator.graph();
  const RemovalCondition cond{config.removal, config.tau};

  DiscoveryResult result{Subgraph::full(graph), {}, 0.0, 0.0, 0, 0};
  Subgraph& h = result.subgraph;
  result.full_metric = evaluator.evaluate(h);
  ++result.evaluations;
  double f_current = result.full_metric;

  for (const NodeId& v : reverse_topo(graph)) {
    for (std::size_t e : ordered_parent_edges(graph, v, config.policy)) {
      h.set(e, false);
      const double f_new = evaluator.evaluate(h);
      ++result.evaluations;
      const bool remove = removal_condition(cond, f_current, f_new, result.full_metric);
      result.log.push_back(AcdcStep{e, f_current, f_new, remove});
      if (remove) {
        f_current = f_new;
      } else {
        h.set(e, true);
      }
    }
  }

  result.final_metric = f_current;
  if (config.prunes()) {
    Subgraph pruned = prune_disconnected(h);
    result.pruned_edges = h.edge_count() - pruned.edge_count();
    if (result.pruned_edges > 0) {
      h = pruned;
      result.final_metric = evaluator.evaluate(h);
      ++result.evaluations;
    }
  }
  return result;
}

DiscoveryResult acdc_run(const Model& model, const CompGraph& graph, const TaskDataset& dataset,
                         const AcdcConfig& config) {
  config.validate();
  SubgraphEvaluator evaluator(model, graph, dataset, config.ablation, nullptr, config.threads);
  return acdc_run(evaluator, config);
}

Subgraph replay_log(const CompGraph& graph, const std::vector<AcdcStep>& log) {
  Subgraph h = Subgraph::full(graph);
  for (const AcdcStep& s : log) {
    if (s.removed) h.set(s.edge, false);
  }
  return h;
}

Subgraph prune_disconnected(const Subgraph& subgraph) {
  const CompGraph& g = subgraph.graph();
  const ModelConfig& c = g.config();
  const auto& nodes = g.nodes();
  std::vector<bool> from_input(nodes.size(), false);
  std::vector<bool> to_output(nodes.size(), false);

  for (const NodeId& n : nodes) {
    const std::size_t i = node_index(c, n);
    if (n.kind == NodeKind::kTokEmbed || n.kind == NodeKind::kPosEmbed) {
      from_input[i] = true;
      continue;
    }
    for (InputSlot s : g.slots(n)) {
      for (std::size_t e : g.incoming(n, s)) {
        if (subgraph.contains(e) && from_input[node_index(c, g.edge(e).src)]) from_input[i] = true;
      }
    }
  }
  to_output[node_index(c, NodeId::out())] = true;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const NodeId& n = *it;
    for (InputSlot s : g.slots(n)) {
      if (!to_output[node_index(c, n)]) continue;
      for (std::size_t e : g.incoming(n, s)) {
        if (subgraph.contains(e)) to_output[node_index(c, g.edge(e).src)] = true;
      }
    }
  }

  Subgraph out = Subgraph::empty(g);
  for (std::size_t e : subgraph.edge_indices()) {
    const Edge& edge = g.edge(e);
    if (from_input[node_index(c, edge.src)] && to_output[node_index(c, edge.dst)]) out.set(e, true);
  }
  return out;
}

std::vector<DiscoveryResult> tau_sweep(const SubgraphEvaluator& evaluator, const AcdcConfig& base,
                                       const std::vector<double>& taus) {
  std::vector<DiscoveryResult> out;
  out.reserve(taus.size());
  for (double tau : taus) {
    AcdcConfig c = base;
    c.tau = tau;
    out.push_back(acdc_run(evaluator, c));
  }
  return out;
}

std::vector<double> log_space(double lo, double hi, std::size_t count) {
  require(lo > 0.0 && hi >= lo && count >= 1, ErrorKind::kUsage, "invalid log-space range");
  if (count == 1) return {hi};
  std::vector<double> out;
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1)));
  }
  return out;
}

}  // namespace autocirc
