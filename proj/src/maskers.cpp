#include "autocirc/maskers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

#include "autocirc/error.hpp"
#include "autocirc/rng.hpp"

namespace autocirc {

using num::Slot;
using num::Tape;
using num::Tensor;

std::string to_string(const MaskUnit& u) {
  std::string s = to_string(u.node);
  if (!u.is_output()) s += "." + std::string(to_string(u.slot));
  return s;
}

std::vector<MaskUnit> mask_units(const ModelConfig& c, bool with_qkv) {
  std::vector<MaskUnit> out;
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    if (with_qkv) {
      for (std::uint32_t h = 0; h < c.n_heads; ++h) {
        for (InputSlot s : {InputSlot::kQ, InputSlot::kK, InputSlot::kV}) out.push_back({NodeId::attn(l, h), s});
      }
    }
    for (std::uint32_t h = 0; h < c.n_heads; ++h) out.push_back({NodeId::attn(l, h), InputSlot::kIn});
    if (c.has_mlp()) out.push_back({NodeId::mlp(l), InputSlot::kIn});
  }
  return out;
}

std::vector<MaskUnit> mask_units(const CompGraph& graph) {
  return mask_units(graph.config(), graph.granularity() == Granularity::kHeadsQkvMlps);
}

namespace {

std::map<std::pair<std::size_t, InputSlot>, std::size_t> unit_lookup(const ModelConfig& c,
                                                                     const std::vector<MaskUnit>& units) {
  std::map<std::pair<std::size_t, InputSlot>, std::size_t> out;
  for (std::size_t j = 0; j < units.size(); ++j) out[{node_index(c, units[j].node), units[j].slot}] = j;
  return out;
}

}  // namespace

Subgraph induced_subgraph(const CompGraph& graph, const std::vector<MaskUnit>& units,
                          const std::vector<bool>& open) {
  require(units.size() == open.size(), ErrorKind::kDimension, "mask length differs from unit count");
  const ModelConfig& c = graph.config();
  const auto lookup = unit_lookup(c, units);
  auto is_open = [&](const NodeId& n, InputSlot s) {
    auto it = lookup.find({node_index(c, n), s});
    return it == lookup.end() || open[it->second];
  };
  Subgraph h = Subgraph::empty(graph);
  for (std::size_t e = 0; e < graph.edge_count(); ++e) {
    const Edge& edge = graph.edge(e);
    const bool src_ok = is_open(edge.src, InputSlot::kIn);
    bool dst_ok = true;
    if (edge.dst.kind != NodeKind::kOutput) dst_ok = is_open(edge.dst, InputSlot::kIn);
    if (edge.slot != InputSlot::kIn) dst_ok = dst_ok && is_open(edge.dst, edge.slot);
    h.set(e, src_ok && dst_ok);
  }
  return h;
}

std::vector<NodeId> open_nodes(const std::vector<MaskUnit>& units, const std::vector<bool>& open) {
  std::vector<NodeId> out;
  for (std::size_t j = 0; j < units.size(); ++j) {
    if (units[j].is_output() && open[j]) out.push_back(units[j].node);
  }
  return out;
}

double NodeMask::expectation(std::size_t j) const {
  const double s = 1.0 / (1.0 + std::exp(-log_alpha.at(j)));
  return std::clamp(s * (gate.zeta - gate.gamma) + gate.gamma, 0.0, 1.0);
}

void SpConfig::validate() const {
  require(steps >= 1, ErrorKind::kUsage, "sp needs at least one step");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::kUsage, "lambda must be non-negative");
  require(learning_rate > 0.0, ErrorKind::kUsage, "learning rate must be positive");
}

double expected_l0(const std::vector<double>& log_alpha, const num::HardConcrete& g) {
  const double shift = g.beta * std::log(-g.gamma / g.zeta);
  double total = 0.0;
  for (double a : log_alpha) total += 1.0 / (1.0 + std::exp(-(a - shift)));
  return total;
}

namespace {

/// Full-graph execution that lets a callback rewrite every unit activation.
class UnitHooks : public PatchHooks {
 public:
  using Transform = std::function<Slot(Tape&, std::size_t unit, Slot value)>;

  UnitHooks(const CompGraph& graph, const std::vector<MaskUnit>& units, Transform transform)
      : PatchHooks(graph, nullptr, AblationMode::kZero, nullptr),
        lookup_(unit_lookup(graph.config(), units)),
        transform_(std::move(transform)) {}

  Slot on_output(Tape& tape, const NodeId& node, Slot contribution) override {
    return PatchHooks::on_output(tape, node, apply(tape, node, InputSlot::kIn, contribution));
  }

  Slot on_qkv(Tape& tape, const NodeId& head, InputSlot which, Slot value) override {
    return apply(tape, head, which, value);
  }

 private:
  Slot apply(Tape& tape, const NodeId& node, InputSlot slot, Slot value) {
    auto it = lookup_.find({node_index(graph().config(), node), slot});
    if (it == lookup_.end()) return value;
    return transform_(tape, it->second, value);
  }

  std::map<std::pair<std::size_t, InputSlot>, std::size_t> lookup_;
  Transform transform_;
};

std::size_t positions_of(const TaskDataset& d) {
  std::size_t n = 0;
  for (const auto& ex : d.examples) n += ex.targets.positions.size();
  return n;
}

}  // namespace

std::vector<Tensor> unit_activations(const ExampleActivations& acts, const ModelConfig& c,
                                     const std::vector<MaskUnit>& units) {
  std::vector<Tensor> out;
  out.reserve(units.size());
  for (const MaskUnit& u : units) {
    if (u.is_output()) {
      out.push_back(acts.contributions.at(node_index(c, u.node)));
    } else {
      out.push_back(acts.qkv.at(qkv_index(c, u.node.layer, u.node.head, u.slot)));
    }
  }
  return out;
}

SpLoss sp_loss(const SubgraphEvaluator& ev, const std::vector<MaskUnit>& units,
               const std::vector<double>& log_alpha, const std::vector<double>& u, double lambda,
               const num::HardConcrete& gate, bool with_grad) {
  require(log_alpha.size() == units.size() && u.size() == units.size(), ErrorKind::kDimension,
          "gate parameters differ in length from the unit list");
  const TaskDataset& data = ev.dataset();
  const ModelConfig& c = ev.model().config();
  const double total_positions = static_cast<double>(positions_of(data));
  std::vector<double> metric(data.size(), 0.0);
  std::vector<std::vector<double>> grads(data.size());

  parallel_for(data.size(), ev.threads(), [&](std::size_t i) {
    std::vector<Tensor> repl;
    if (ev.mode() == AblationMode::kCorrupted) repl = unit_activations(ev.corrupt_cache().examples[i], c, units);
    Tape tape(with_grad);
    WeightSlots w = bind_weights(tape, ev.model(), false);
    Slot alpha = tape.leaf(Tensor::vector(log_alpha));
    Slot z = tape.hard_concrete(alpha, u, gate);
    UnitHooks hooks(ev.graph(), units, [&](Tape& t, std::size_t j, Slot clean) {
      const std::size_t idx[1] = {j};
      Slot zj = t.pick(z, idx);
      if (repl.empty()) return t.scale_by(clean, zj);
      Slot r = t.constant(repl[j]);
      return t.add(r, t.scale_by(t.sub(clean, r), zj));
    });
    Slot logits = run_forward(tape, ev.model(), w, data.examples[i].clean, {}, hooks);
    Slot m = metric_sum_on_tape(tape, data.metric, logits, ev.reference_logits(i), data.examples[i].targets);
    metric[i] = tape.value(m).item();
    if (with_grad) {
      const Slot wrt[1] = {alpha};
      grads[i] = tape.reverse_grad(m, wrt)[0].values();
    }
  });

  SpLoss out;
  for (double v : metric) out.metric += v;
  out.metric /= total_positions;
  out.penalty = expected_l0(log_alpha, gate);
  out.loss = out.metric + lambda * out.penalty;
  if (with_grad) {
    out.grad.assign(units.size(), 0.0);
    for (const auto& g : grads) {
      for (std::size_t j = 0; j < g.size(); ++j) out.grad[j] += g[j];
    }
    const double shift = gate.beta * std::log(-gate.gamma / gate.zeta);
    for (std::size_t j = 0; j < units.size(); ++j) {
      const double s = 1.0 / (1.0 + std::exp(-(log_alpha[j] - shift)));
      out.grad[j] = out.grad[j] / total_positions + lambda * s * (1.0 - s);
    }
  }
  return out;
}

SpResult sp_train(const SubgraphEvaluator& ev, const std::vector<MaskUnit>& units, const SpConfig& config) {
  config.validate();
  require(config.ablation == ev.mode(), ErrorKind::kUsage, "evaluator ablation mode differs from config");
  Rng rng(config.seed);
  SpResult result;
  result.mask.units = units;
  for (std::size_t j = 0; j < units.size(); ++j) {
    result.mask.log_alpha.push_back(config.init_mean + config.init_std * rng.normal());
  }
  std::vector<double> u(units.size());
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (double& x : u) x = rng.open_uniform();
    SpLoss l = sp_loss(ev, units, result.mask.log_alpha, u, config.lambda, result.mask.gate, true);
    require(std::isfinite(l.loss), ErrorKind::kNumeric, "non-finite sp loss at step " + std::to_string(step));
    result.history.push_back({l.loss, l.metric, l.penalty});
    for (std::size_t j = 0; j < units.size(); ++j) {
      result.mask.log_alpha[j] -= config.learning_rate * l.grad[j];
    }
  }
  return result;
}

MaskSelection sp_finalize(const CompGraph& graph, NodeMask& mask) {
  mask.rounded.assign(mask.units.size(), false);
  for (std::size_t j = 0; j < mask.units.size(); ++j) mask.rounded[j] = mask.expectation(j) >= 0.5;
  return MaskSelection{mask.rounded, open_nodes(mask.units, mask.rounded),
                       induced_subgraph(graph, mask.units, mask.rounded)};
}

std::vector<Tensor> unit_gradients(const SubgraphEvaluator& ev, const std::vector<MaskUnit>& units,
                                   std::size_t example) {
  const TaskExample& ex = ev.dataset().examples.at(example);
  Tape tape(true);
  WeightSlots w = bind_weights(tape, ev.model(), false);
  std::vector<std::optional<Slot>> seen(units.size());
  UnitHooks hooks(ev.graph(), units, [&](Tape&, std::size_t j, Slot v) {
    seen[j] = v;
    return v;
  });
  Slot logits = run_forward(tape, ev.model(), w, ex.clean, {}, hooks);
  Slot m = tape.scale(metric_sum_on_tape(tape, ev.dataset().metric, logits, ev.reference_logits(example), ex.targets),
                      1.0 / static_cast<double>(ex.targets.positions.size()));
  std::vector<Slot> wrt;
  for (std::size_t j = 0; j < units.size(); ++j) {
    require(seen[j].has_value(), ErrorKind::kCoverage, "no activation recorded for unit " + to_string(units[j]));
    wrt.push_back(*seen[j]);
  }
  return tape.reverse_grad(m, wrt);
}

double metric_with_unit(const SubgraphEvaluator& ev, const std::vector<MaskUnit>& units,
                        std::size_t example, std::size_t which, const Tensor& value) {
  const TaskExample& ex = ev.dataset().examples.at(example);
  Tape tape(false);
  WeightSlots w = bind_weights(tape, ev.model(), false);
  UnitHooks hooks(ev.graph(), units, [&](Tape& t, std::size_t j, Slot v) {
    if (j != which) return v;
    require(t.value(v).shape() == value.shape(), ErrorKind::kDimension, "replacement shape differs");
    return t.leaf(value);
  });
  Slot logits = run_forward(tape, ev.model(), w, ex.clean, {}, hooks);
  return eval_metric(ev.dataset().metric, tape.value(logits), ev.reference_logits(example), ex.targets);
}

ImportanceTable hisp_scores(const SubgraphEvaluator& ev, const std::vector<MaskUnit>& units,
                            const ActivationCache* corrupt_override) {
  const TaskDataset& data = ev.dataset();
  const ModelConfig& c = ev.model().config();
  const ActivationCache* corrupt = nullptr;
  if (ev.mode() == AblationMode::kCorrupted) corrupt = corrupt_override ? corrupt_override : &ev.corrupt_cache();

  std::vector<std::vector<double>> per_example(data.size(), std::vector<double>(units.size(), 0.0));
  parallel_for(data.size(), ev.threads(), [&](std::size_t i) {
    const auto clean = unit_activations(forward_example(ev.model(), data.examples[i].clean), c, units);
    const auto grads = unit_gradients(ev, units, i);
    std::vector<Tensor> dirty;
    if (corrupt) dirty = unit_activations(corrupt->examples.at(i), c, units);
    for (std::size_t j = 0; j < units.size(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < clean[j].size(); ++k) {
        const double diff = corrupt ? clean[j][k] - dirty[j][k] : clean[j][k];
        dot += diff * grads[j][k];
      }
      per_example[i][j] = std::abs(dot);
    }
  });

  ImportanceTable table;
  table.units = units;
  table.scores.assign(units.size(), 0.0);
  for (const auto& row : per_example) {
    for (std::size_t j = 0; j < units.size(); ++j) table.scores[j] += row[j];
  }
  for (std::size_t j = 0; j < units.size(); ++j) {
    table.scores[j] /= static_cast<double>(data.size());
    table.layer.push_back(units[j].node.layer);
  }
  return table;
}

ImportanceTable hisp_layer_normalize(const ImportanceTable& table) {
  ImportanceTable out = table;
  std::map<std::uint32_t, double> norm;
  for (std::size_t j = 0; j < table.scores.size(); ++j) norm[table.layer[j]] += table.scores[j] * table.scores[j];
  for (std::size_t j = 0; j < table.scores.size(); ++j) {
    const double n = std::sqrt(norm[table.layer[j]]);
    out.scores[j] = n > 0.0 ? table.scores[j] / n : 0.0;
  }
  return out;
}

std::vector<bool> top_k(const ImportanceTable& table, std::size_t k) {
  require(k <= table.units.size(), ErrorKind::kUsage,
          "k = " + std::to_string(k) + " exceeds the " + std::to_string(table.units.size()) + " maskable units");
  std::vector<std::size_t> order(table.units.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return table.scores[a] > table.scores[b]; });
  std::vector<bool> open(table.units.size(), false);
  for (std::size_t i = 0; i < k; ++i) open[order[i]] = true;
  return open;
}

std::vector<MaskSelection> hisp_topk_sweep(const ImportanceTable& table, const CompGraph& graph,
                                           const std::vector<std::size_t>& ks) {
  std::vector<MaskSelection> out;
  for (std::size_t k : ks) {
    auto open = top_k(table, k);
    out.push_back({open, open_nodes(table.units, open), induced_subgraph(graph, table.units, open)});
  }
  return out;
}

std::size_t nonzero_units(const ImportanceTable& table) {
  return static_cast<std::size_t>(std::count_if(table.scores.begin(), table.scores.end(),
                                                [](double s) { return s != 0.0; }));
}

}  // namespace autocirc
