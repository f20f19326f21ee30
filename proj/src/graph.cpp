#include "autocirc/graph.hpp"

#include <cstdio>
#include <sstream>

#include "autocirc/error.hpp"

namespace autocirc {

std::string_view to_string(Granularity g) {
  return g == Granularity::kHeadsMlps ? "heads" : "heads-qkv";
}

Granularity parse_granularity(std::string_view s) {
  if (s == "heads") return Granularity::kHeadsMlps;
  if (s == "heads-qkv") return Granularity::kHeadsQkvMlps;
  fail(ErrorKind::kUsage, "unknown granularity '" + std::string(s) + "'");
}

std::string_view to_string(ParentPolicy p) {
  return p == ParentPolicy::kDefault ? "default" : "ascending-heads";
}

ParentPolicy parse_parent_policy(std::string_view s) {
  if (s == "default") return ParentPolicy::kDefault;
  if (s == "ascending-heads") return ParentPolicy::kAscendingHeads;
  fail(ErrorKind::kUsage, "unknown parent policy '" + std::string(s) + "'");
}

std::string to_string(const Edge& e) {
  return to_string(e.src) + "->" + to_string(e.dst) + "." + std::string(to_string(e.slot));
}

std::optional<Edge> parse_edge(std::string_view text) {
  const auto arrow = text.find("->");
  if (arrow == std::string_view::npos) return std::nullopt;
  const auto dot = text.rfind('.');
  if (dot == std::string_view::npos || dot < arrow) return std::nullopt;
  auto src = parse_node(text.substr(0, arrow));
  auto dst = parse_node(text.substr(arrow + 2, dot - arrow - 2));
  auto slot = parse_slot(text.substr(dot + 1));
  if (!src || !dst || !slot) return std::nullopt;
  return Edge{*src, *dst, *slot};
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::vector<NodeId> parents_of(const ModelConfig& c, const NodeId& dst, ParentPolicy policy) {
  std::vector<NodeId> out;
  auto push_heads = [&](std::uint32_t layer) {
    if (policy == ParentPolicy::kDefault) {
      for (std::uint32_t h = c.n_heads; h-- > 0;) out.push_back(NodeId::attn(layer, h));
    } else {
      for (std::uint32_t h = 0; h < c.n_heads; ++h) out.push_back(NodeId::attn(layer, h));
    }
  };
  std::uint32_t below = 0;  // layers strictly below this are fully visible
  switch (dst.kind) {
    case NodeKind::kHead: below = dst.layer; break;
    case NodeKind::kMlp:
      push_heads(dst.layer);
      below = dst.layer;
      break;
    case NodeKind::kOutput: below = c.n_layers; break;
    default: return out;
  }
  for (std::uint32_t l = below; l-- > 0;) {
    if (c.has_mlp()) out.push_back(NodeId::mlp(l));
    push_heads(l);
  }
  if (dst.kind == NodeKind::kHead && c.has_pos()) out.push_back(NodeId::pos());
  out.push_back(NodeId::tok());
  return out;
}

}  // namespace

CompGraph::CompGraph(const ModelConfig& config, Granularity granularity)
    : config_(config), granularity_(granularity), nodes_(forward_nodes(config)) {
  config_.validate();
  incoming_.resize(nodes_.size() * 4);
  for (const NodeId& dst : nodes_) {
    for (InputSlot slot : slots(dst)) {
      auto& in = incoming_[site(dst, slot)];
      for (const NodeId& src : parents_of(config_, dst, ParentPolicy::kDefault)) {
        in.push_back(edges_.size());
        edges_.push_back(Edge{src, dst, slot});
      }
    }
  }
  std::ostringstream os;
  os << "L" << config_.n_layers << "H" << config_.n_heads << "D" << config_.d_model << "d"
     << config_.d_head << "M" << config_.d_mlp << "V" << config_.vocab << "C" << config_.n_ctx
     << "A" << to_string(config_.activation) << "N" << to_string(config_.norm) << "P"
     << to_string(config_.pos_embed) << "G" << to_string(granularity_) << ";";
  for (const Edge& e : edges_) os << to_string(e) << ";";
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(os.str())));
  fingerprint_ = buf;
}

bool CompGraph::contains(const NodeId& node) const {
  for (const NodeId& n : nodes_) {
    if (n == node) return true;
  }
  return false;
}

std::vector<InputSlot> CompGraph::slots(const NodeId& dst) const {
  switch (dst.kind) {
    case NodeKind::kHead:
      if (granularity_ == Granularity::kHeadsQkvMlps) return {InputSlot::kQ, InputSlot::kK, InputSlot::kV};
      return {InputSlot::kIn};
    case NodeKind::kMlp:
    case NodeKind::kOutput: return {InputSlot::kIn};
    default: return {};
  }
}

std::size_t CompGraph::site(const NodeId& dst, InputSlot slot) const {
  require(contains(dst), ErrorKind::kIdentifier, "node " + to_string(dst) + " is not in the graph");
  return node_index(config_, dst) * 4 + static_cast<std::size_t>(slot);
}

const std::vector<std::size_t>& CompGraph::incoming(const NodeId& dst, InputSlot slot) const {
  return incoming_.at(site(dst, slot));
}

std::vector<std::size_t> CompGraph::outgoing(const NodeId& src) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    if (edges_[i].src == src) out.push_back(i);
  }
  return out;
}

std::optional<std::size_t> CompGraph::find_edge(const Edge& e) const {
  if (!contains(e.dst)) return std::nullopt;
  const auto dst_slots = slots(e.dst);
  bool slot_ok = false;
  for (InputSlot s : dst_slots) slot_ok = slot_ok || s == e.slot;
  if (!slot_ok) return std::nullopt;
  for (std::size_t i : incoming(e.dst, e.slot)) {
    if (edges_[i].src == e.src) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> CompGraph::find_edge(std::string_view text) const {
  auto e = parse_edge(text);
  if (!e) return std::nullopt;
  return find_edge(*e);
}

CompGraph build_graph(const ModelConfig& config, Granularity granularity) {
  return CompGraph(config, granularity);
}

std::vector<NodeId> reverse_topo(const CompGraph& graph) {
  return std::vector<NodeId>(graph.nodes().rbegin(), graph.nodes().rend());
}

std::vector<std::pair<NodeId, InputSlot>> ordered_parents(const CompGraph& graph, const NodeId& v,
                                                          ParentPolicy policy) {
  require(graph.contains(v), ErrorKind::kIdentifier, "node " + to_string(v) + " is not in the graph");
  std::vector<std::pair<NodeId, InputSlot>> out;
  for (InputSlot slot : graph.slots(v)) {
    for (const NodeId& p : parents_of(graph.config(), v, policy)) out.emplace_back(p, slot);
  }
  return out;
}

std::vector<std::size_t> ordered_parent_edges(const CompGraph& graph, const NodeId& v,
                                              ParentPolicy policy) {
  std::vector<std::size_t> out;
  for (const auto& [p, slot] : ordered_parents(graph, v, policy)) {
    auto idx = graph.find_edge(Edge{p, v, slot});
    require(idx.has_value(), ErrorKind::kIdentifier, "parent edge missing from graph");
    out.push_back(*idx);
  }
  return out;
}

std::size_t Subgraph::edge_count() const {
  std::size_t n = 0;
  for (bool b : included_) n += b ? 1 : 0;
  return n;
}

std::vector<std::size_t> Subgraph::edge_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < included_.size(); ++i) {
    if (included_[i]) out.push_back(i);
  }
  return out;
}

std::vector<NodeId> Subgraph::nodes() const {
  std::vector<bool> seen(graph_->nodes().size(), false);
  for (std::size_t i = 0; i < included_.size(); ++i) {
    if (!included_[i]) continue;
    const Edge& e = graph_->edge(i);
    seen[node_index(graph_->config(), e.src)] = true;
    seen[node_index(graph_->config(), e.dst)] = true;
  }
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i]) out.push_back(graph_->nodes()[i]);
  }
  return out;
}

}  // namespace autocirc
