#include "autocirc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "autocirc/error.hpp"
#include "autocirc/rng.hpp"

namespace autocirc {

using num::Tensor;

Subgraph CanonicalCircuit::to_subgraph(const CompGraph& graph) const {
  Subgraph h = Subgraph::empty(graph);
  for (const std::string& e : edges) {
    auto idx = graph.find_edge(e);
    require(idx.has_value(), ErrorKind::kIdentifier, "canonical edge '" + e + "' is not in the graph");
    h.set(*idx, true);
  }
  return h;
}

std::vector<NodeId> CanonicalCircuit::nodes(const CompGraph& graph) const {
  std::vector<NodeId> out;
  for (const NodeId& n : to_subgraph(graph).nodes()) {
    if (n.kind == NodeKind::kHead || n.kind == NodeKind::kMlp) out.push_back(n);
  }
  return out;
}

namespace {

bool maskable(const NodeId& n) { return n.kind == NodeKind::kHead || n.kind == NodeKind::kMlp; }

}  // namespace

Confusion node_confusion(const CompGraph& graph, const std::vector<NodeId>& chosen,
                         const std::vector<NodeId>& canonical) {
  auto has = [](const std::vector<NodeId>& v, const NodeId& n) { return std::find(v.begin(), v.end(), n) != v.end(); };
  Confusion c;
  for (const NodeId& n : graph.nodes()) {
    if (!maskable(n)) continue;
    const bool pred = has(chosen, n);
    const bool truth = has(canonical, n);
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Confusion edge_confusion(const Subgraph& h, const Subgraph& canonical, ConfusionLevel level) {
  require(&h.graph() == &canonical.graph() || h.graph().fingerprint() == canonical.graph().fingerprint(),
          ErrorKind::kUsage, "subgraphs belong to different graphs");
  if (level == ConfusionLevel::kNode) return node_confusion(h.graph(), h.nodes(), canonical.nodes());
  Confusion c;
  for (std::size_t e = 0; e < h.graph().edge_count(); ++e) {
    const bool pred = h.contains(e);
    const bool truth = canonical.contains(e);
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

RocCurve pareto_roc(std::vector<RocPoint> points) {
  std::vector<RocPoint> kept;
  for (const RocPoint& p : points) {
    bool dominated = false;
    for (const RocPoint& q : points) {
      const bool no_worse = q.fpr <= p.fpr && q.tpr >= p.tpr;
      const bool better = q.fpr < p.fpr || q.tpr > p.tpr;
      if (no_worse && better) dominated = true;
    }
    bool duplicate = false;
    for (const RocPoint& k : kept) duplicate = duplicate || (k.fpr == p.fpr && k.tpr == p.tpr);
    if (!dominated && !duplicate) kept.push_back(p);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const RocPoint& a, const RocPoint& b) { return a.fpr < b.fpr; });
  RocCurve curve;
  curve.pareto = true;
  if (kept.empty() || kept.front().fpr != 0.0 || kept.front().tpr != 0.0) curve.points.push_back({0.0, 0.0, 0.0});
  for (const RocPoint& p : kept) curve.points.push_back(p);
  if (curve.points.back().fpr != 1.0 || curve.points.back().tpr != 1.0) curve.points.push_back({1.0, 1.0, 0.0});
  return curve;
}

RocCurve roc_curve(const std::vector<Subgraph>& results, const Subgraph& canonical, ConfusionLevel level,
                   const std::vector<double>& params) {
  require(!results.empty(), ErrorKind::kUsage, "no results to score");
  std::vector<RocPoint> pts;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const Confusion c = edge_confusion(results[i], canonical, level);
    pts.push_back({c.fpr(), c.tpr(), i < params.size() ? params[i] : static_cast<double>(i)});
  }
  return pareto_roc(std::move(pts));
}

double pessimistic_auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) {
    area += (curve.points[i + 1].fpr - curve.points[i].fpr) * curve.points[i].tpr;
  }
  return area;
}

double trapezoid_auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) {
    area += (curve.points[i + 1].fpr - curve.points[i].fpr) * 0.5 * (curve.points[i].tpr + curve.points[i + 1].tpr);
  }
  return area;
}

std::vector<SparsityPoint> sparsity_curve(const SubgraphEvaluator& test, const std::vector<Subgraph>& results) {
  std::vector<SparsityPoint> out;
  for (const Subgraph& h : results) out.push_back({h.edge_count(), test.evaluate(h)});
  return out;
}

std::vector<SparsityPoint> sparsity_frontier(std::vector<SparsityPoint> points) {
  std::stable_sort(points.begin(), points.end(), [](const SparsityPoint& a, const SparsityPoint& b) {
    return a.edges != b.edges ? a.edges < b.edges : a.metric < b.metric;
  });
  std::vector<SparsityPoint> out;
  for (const SparsityPoint& p : points) {
    if (out.empty() || p.metric < out.back().metric) {
      if (!out.empty() && out.back().edges == p.edges) continue;
      out.push_back(p);
    }
  }
  return out;
}

double frontier_at(const std::vector<SparsityPoint>& frontier, std::size_t edges) {
  double best = std::numeric_limits<double>::infinity();
  for (const SparsityPoint& p : frontier) {
    if (p.edges <= edges) best = std::min(best, p.metric);
  }
  return best;
}

std::vector<MatchedPoint> matched_frontiers(const std::vector<SparsityPoint>& a,
                                            const std::vector<SparsityPoint>& b) {
  std::vector<std::size_t> counts;
  for (const auto& p : a) counts.push_back(p.edges);
  for (const auto& p : b) counts.push_back(p.edges);
  std::sort(counts.begin(), counts.end());
  counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
  std::vector<MatchedPoint> out;
  for (std::size_t e : counts) {
    const double fa = frontier_at(a, e), fb = frontier_at(b, e);
    if (std::isfinite(fa) && std::isfinite(fb)) out.push_back({e, fa, fb});
  }
  return out;
}

Model reset_network(const Model& model, std::uint64_t seed) {
  const ModelConfig& c = model.config();
  std::map<std::string, Tensor> w = model.weights();
  Rng rng(seed);
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (const char* m : {"Q", "K", "V"}) {
      const auto perm = rng.permutation(c.n_heads);
      for (const std::string& name : {p + "attn.W_" + m, p + "attn.b_" + m}) {
        const Tensor& src = model.weight(name);
        Tensor& dst = w.at(name);
        for (std::uint32_t h = 0; h < c.n_heads; ++h) dst.set_slice(h, src.slice(perm[h]));
      }
    }
    if (c.has_mlp()) {
      const std::string name = p + "mlp.b_in";
      const auto perm = rng.permutation(c.d_mlp);
      const Tensor& src = model.weight(name);
      Tensor& dst = w.at(name);
      for (std::uint32_t i = 0; i < c.d_mlp; ++i) dst[i] = src[perm[i]];
    }
  }
  return Model(c, std::move(w));
}

}  // namespace autocirc
