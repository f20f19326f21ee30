#include <algorithm>
#include <cmath>

#include "autocirc/error.hpp"
#include "autocirc/maskers.hpp"
#include "autocirc/zoo.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace autocirc;
using num::Tensor;

namespace {

struct Setup {
  Model model;
  CompGraph graph;
  TaskDataset data;
};

Setup random_setup(Rng& rng, Granularity g, MetricKind metric = MetricKind::kKl, bool allow_norm = true) {
  const ModelConfig c = testutil::random_config(rng, true, allow_norm);
  Model m = Model::random(c, rng.next());
  return {m, CompGraph(c, g), testutil::random_dataset(rng, c, 2, 4, metric)};
}

/// Edge rule written out independently of the library: both endpoints must be
/// open, and a masked q/k/v input must be open too.
std::size_t induced_oracle(const CompGraph& g, const std::vector<MaskUnit>& units, const std::vector<bool>& open) {
  auto is_open = [&](const NodeId& n, InputSlot s) {
    for (std::size_t j = 0; j < units.size(); ++j)
      if (units[j].node == n && units[j].slot == s) return static_cast<bool>(open[j]);
    return true;  // not maskable
  };
  std::size_t n = 0;
  for (const Edge& e : g.edges()) {
    const bool src = e.src.is_embed() || is_open(e.src, InputSlot::kIn);
    const bool dst = e.dst.kind == NodeKind::kOutput ||
                     (is_open(e.dst, InputSlot::kIn) && (e.slot == InputSlot::kIn || is_open(e.dst, e.slot)));
    n += src && dst;
  }
  return n;
}

}  // namespace

TEST_CASE("mask units and induced subgraphs") {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_mlp = 3;
  std::vector<std::string> names;
  for (const MaskUnit& u : mask_units(c, true)) names.push_back(to_string(u));
  CHECK(names == std::vector<std::string>{"a0.h0.q", "a0.h0.k", "a0.h0.v", "a0.h1.q", "a0.h1.k", "a0.h1.v", "a0.h0",
                                          "a0.h1", "m0", "a1.h0.q", "a1.h0.k", "a1.h0.v", "a1.h1.q", "a1.h1.k",
                                          "a1.h1.v", "a1.h0", "a1.h1", "m1"});
  CHECK(mask_units(c, false).size() == 6);

  const CompGraph g(c, Granularity::kHeadsQkvMlps);
  const auto units = mask_units(g);
  CHECK(induced_subgraph(g, units, std::vector<bool>(units.size(), true)) == Subgraph::full(g));
  const Subgraph closed = induced_subgraph(g, units, std::vector<bool>(units.size(), false));
  REQUIRE(closed.edge_count() == 1);
  CHECK(to_string(g.edge(closed.edge_indices()[0])) == "tok->out.in");

  // Masking one head output removes exactly its incident edges.
  std::vector<bool> open(units.size(), true);
  open[7] = false;  // a0.h1
  const NodeId h = NodeId::attn(0, 1);
  std::size_t incident = 0;
  for (const Edge& e : g.edges()) incident += (e.src == h || e.dst == h);
  CHECK(induced_subgraph(g, units, open).edge_count() == g.edge_count() - incident);

  Rng rng(71);
  for (std::uint32_t L = 1; L <= 3; ++L)
    for (Granularity gran : {Granularity::kHeadsMlps, Granularity::kHeadsQkvMlps})
      for (int trial = 0; trial < 20; ++trial) {
        ModelConfig rc;
        rc.n_layers = L;
        rc.n_heads = 1 + static_cast<std::uint32_t>(rng.below(3));
        rc.d_mlp = rng.below(2) ? 3 : 0;
        const CompGraph rg(rc, gran);
        const auto ru = mask_units(rg);
        std::vector<bool> ro(ru.size());
        for (std::size_t j = 0; j < ro.size(); ++j) ro[j] = rng.below(2);
        CHECK(induced_subgraph(rg, ru, ro).edge_count() == induced_oracle(rg, ru, ro));
      }
}

TEST_CASE("hard-concrete gate constants") {
  const num::HardConcrete gate;
  CHECK(expected_l0({0.0}, gate) == doctest::Approx(1.0 / (1.0 + std::pow(11.0, -2.0 / 3.0))).epsilon(1e-12));
  CHECK(expected_l0({0.0}, gate) == doctest::Approx(0.8318).epsilon(1e-4));
  NodeMask m;
  m.units = {MaskUnit{NodeId::mlp(0)}, MaskUnit{NodeId::mlp(1)}};
  m.log_alpha = {0.0, -10.0};
  CHECK(m.expectation(0) == doctest::Approx(0.5));
  CHECK(m.expectation(1) == 0.0);
}

TEST_CASE("SP gradients match central differences under frozen noise") {
  Rng rng(72);
  for (int trial = 0; trial < 8; ++trial) {
    const Setup s = random_setup(rng, trial % 2 ? Granularity::kHeadsQkvMlps : Granularity::kHeadsMlps);
    const auto units = mask_units(s.graph);
    std::vector<double> alpha(units.size()), u(units.size());
    for (auto& a : alpha) a = 0.3 * rng.normal();
    for (auto& v : u) v = 0.3 + 0.4 * rng.uniform();
    for (AblationMode mode : {AblationMode::kZero, AblationMode::kCorrupted}) {
      const SubgraphEvaluator ev(s.model, s.graph, s.data, mode);
      const num::HardConcrete gate;
      const SpLoss l = sp_loss(ev, units, alpha, u, 0.7, gate, true);
      auto f = [&](const Tensor& a) {
        return sp_loss(ev, units, std::vector<double>(a.values()), u, 0.7, gate, false).loss;
      };
      const Tensor g = Tensor::vector(l.grad);
      CHECK(testutil::rel_error(g, num::finite_diff_oracle(f, Tensor::vector(alpha), 1e-6)) <= 1e-4);
      CHECK(l.loss == doctest::Approx(l.metric + 0.7 * l.penalty).epsilon(1e-12));
    }
  }
}

TEST_CASE("SP training is reproducible and lambda = 0 leaves no penalty") {
  Rng rng(73);
  const Setup s = random_setup(rng, Granularity::kHeadsQkvMlps);
  const SubgraphEvaluator ev(s.model, s.graph, s.data, AblationMode::kZero);
  SpConfig c;
  c.steps = 20;
  c.seed = 4;
  const SpResult a = sp_train(ev, mask_units(s.graph), c);
  const SpResult b = sp_train(ev, mask_units(s.graph), c);
  CHECK(a.mask.log_alpha == b.mask.log_alpha);
  REQUIRE(a.history.size() == 20);
  c.lambda = 0.0;
  for (const SpStepLog& st : sp_train(ev, mask_units(s.graph), c).history) CHECK(st.loss == st.metric);
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), Error);

  NodeMask m = a.mask;
  const MaskSelection sel = sp_finalize(s.graph, m);
  REQUIRE(m.rounded.size() == m.units.size());
  for (std::size_t j = 0; j < m.units.size(); ++j) CHECK(m.rounded[j] == (m.expectation(j) >= 0.5));
  CHECK(sel.subgraph == induced_subgraph(s.graph, m.units, m.rounded));
}

TEST_CASE("OR gate: SP keeps one input, the MLP and an extra unit") {
  const ZooModel z = build_or_gate_model();
  const CompGraph g(z.model.config(), Granularity::kHeadsQkvMlps);
  const TaskDataset d = gen_dataset("or-gate", 4, 0);
  const SubgraphEvaluator ev(z.model, g, d, AblationMode::kZero);
  SpConfig c;
  c.lambda = 1.0;
  c.seed = 0;
  SpResult r = sp_train(ev, mask_units(g), c);
  const MaskSelection sel = sp_finalize(g, r.mask);
  const bool h0 = std::count(sel.nodes.begin(), sel.nodes.end(), NodeId::attn(0, 0)) > 0;
  const bool h1 = std::count(sel.nodes.begin(), sel.nodes.end(), NodeId::attn(0, 1)) > 0;
  CHECK(h0 != h1);
  CHECK(std::count(sel.nodes.begin(), sel.nodes.end(), NodeId::mlp(0)) == 1);
  const auto open_units = std::count(sel.open.begin(), sel.open.end(), true);
  CHECK(open_units >= 3);
}

TEST_CASE("HISP scores follow the attribution formula") {
  Rng rng(74);
  for (int trial = 0; trial < 6; ++trial) {
    const Setup s = random_setup(rng, Granularity::kHeadsQkvMlps);
    const auto units = mask_units(s.graph);
    for (AblationMode mode : {AblationMode::kCorrupted, AblationMode::kZero}) {
      const SubgraphEvaluator ev(s.model, s.graph, s.data, mode);
      const ImportanceTable t = hisp_scores(ev, units);
      std::vector<double> expect(units.size(), 0.0);
      for (std::size_t i = 0; i < s.data.size(); ++i) {
        const auto clean = unit_activations(forward_example(s.model, s.data.examples[i].clean), s.model.config(), units);
        const auto cor = mode == AblationMode::kZero
                             ? clean
                             : unit_activations(ev.corrupt_cache().examples[i], s.model.config(), units);
        const auto grads = unit_gradients(ev, units, i);
        for (std::size_t j = 0; j < units.size(); ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < clean[j].size(); ++k)
            dot += (clean[j][k] - (mode == AblationMode::kZero ? 0.0 : cor[j][k])) * grads[j][k];
          expect[j] += std::abs(dot) / static_cast<double>(s.data.size());
        }
      }
      for (std::size_t j = 0; j < units.size(); ++j) {
        CHECK(t.scores[j] >= 0.0);
        CHECK(t.scores[j] == doctest::Approx(expect[j]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("HISP activation gradients match central differences") {
  // KL sits at its minimum on clean activations, so its gradient there is
  // zero; check metrics with a non-trivial gradient instead.
  Rng rng(75);
  const MetricKind metrics[] = {MetricKind::kLogitDiff, MetricKind::kNll, MetricKind::kL2, MetricKind::kProbDiff};
  for (int trial = 0; trial < 8; ++trial) {
    const Setup s = random_setup(rng, Granularity::kHeadsQkvMlps, metrics[trial % 4]);
    const auto units = mask_units(s.graph);
    const SubgraphEvaluator ev(s.model, s.graph, s.data, AblationMode::kCorrupted);
    const auto clean = unit_activations(forward_example(s.model, s.data.examples[0].clean), s.model.config(), units);
    const auto grads = unit_gradients(ev, units, 0);
    for (std::size_t j = 0; j < units.size(); ++j) {
      CAPTURE(to_string(units[j]));
      auto f = [&](const Tensor& x) { return metric_with_unit(ev, units, 0, j, x); };
      CHECK(testutil::rel_error(grads[j], num::finite_diff_oracle(f, clean[j], 1e-6)) <= 1e-4);
    }
  }
}

TEST_CASE("HISP special cases") {
  Rng rng(76);
  Setup s = random_setup(rng, Granularity::kHeadsQkvMlps);
  const auto units = mask_units(s.graph);
  {
    TaskDataset same = s.data;
    for (auto& ex : same.examples) ex.corrupted = ex.clean;
    const SubgraphEvaluator ev(s.model, s.graph, same, AblationMode::kCorrupted);
    for (double v : hisp_scores(ev, units).scores) CHECK(v == 0.0);
  }
  {
    const SubgraphEvaluator cor(s.model, s.graph, s.data, AblationMode::kCorrupted);
    const SubgraphEvaluator zero(s.model, s.graph, s.data, AblationMode::kZero);
    ActivationCache blank = cor.corrupt_cache();
    for (auto& ex : blank.examples) {
      for (auto& t : ex.contributions) t = Tensor(t.shape());
      for (auto& t : ex.qkv) t = Tensor(t.shape());
      for (auto& t : ex.resid) t = Tensor(t.shape());
      for (auto& t : ex.mlp_inputs) t = Tensor(t.shape());
    }
    CHECK(hisp_scores(cor, units, &blank).scores == hisp_scores(zero, units).scores);
  }
  {
    // A single attention-only layer read directly by a logit-difference
    // metric is linear in each head output, so the attribution estimate is
    // the exact patching effect.
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 3;
    c.d_model = 6;
    c.d_head = 2;
    c.vocab = 7;
    c.n_ctx = 4;
    const Model m = Model::random(c, 8);
    const CompGraph g(c, Granularity::kHeadsMlps);
    const TaskDataset d = testutil::random_dataset(rng, c, 3, 4, MetricKind::kLogitDiff);
    const SubgraphEvaluator ev(m, g, d, AblationMode::kCorrupted);
    const auto us = mask_units(g);
    const ImportanceTable t = hisp_scores(ev, us);
    for (std::size_t j = 0; j < us.size(); ++j) {
      double effect = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const auto cor = unit_activations(ev.corrupt_cache().examples[i], c, us);
        const auto cl = unit_activations(forward_example(m, d.examples[i].clean), c, us);
        effect += std::abs(metric_with_unit(ev, us, i, j, cor[j]) - metric_with_unit(ev, us, i, j, cl[j]));
      }
      CHECK(t.scores[j] == doctest::Approx(effect / static_cast<double>(d.size())).epsilon(1e-9));
    }
  }
}

TEST_CASE("layer normalisation and top-k selection") {
  ImportanceTable t;
  t.units = {MaskUnit{NodeId::attn(0, 0)}, MaskUnit{NodeId::attn(0, 1)}, MaskUnit{NodeId::mlp(0)},
             MaskUnit{NodeId::attn(1, 0)}, MaskUnit{NodeId::attn(1, 1)}};
  t.scores = {3.0, 4.0, 0.0, 0.0, 2.5};
  t.layer = {0, 0, 0, 1, 1};
  const ImportanceTable n = hisp_layer_normalize(t);
  CHECK(n.scores[0] == doctest::Approx(0.6));
  CHECK(n.scores[1] == doctest::Approx(0.8));
  CHECK(n.scores[2] == 0.0);
  CHECK(n.scores[4] == doctest::Approx(1.0));
  CHECK(nonzero_units(t) == 3);

  CHECK(top_k(n, 1) == std::vector<bool>{false, false, false, false, true});
  CHECK(top_k(n, 2) == std::vector<bool>{false, true, false, false, true});
  // Ties at zero resolve in canonical order.
  CHECK(top_k(n, 4) == std::vector<bool>{true, true, true, false, true});
  CHECK(top_k(n, 0) == std::vector<bool>(5, false));
  CHECK_THROWS_AS(top_k(n, 6), Error);

  ImportanceTable zeros = t;
  zeros.scores.assign(5, 0.0);
  CHECK(hisp_layer_normalize(zeros).scores == zeros.scores);
}

TEST_CASE("HISP top-k sweeps") {
  Rng rng(77);
  const Setup s = random_setup(rng, Granularity::kHeadsQkvMlps);
  const auto units = mask_units(s.graph);
  const SubgraphEvaluator ev(s.model, s.graph, s.data, AblationMode::kCorrupted);
  const ImportanceTable n = hisp_layer_normalize(hisp_scores(ev, units));
  const auto sels = hisp_topk_sweep(n, s.graph, {0, units.size()});
  CHECK(sels[0].subgraph.edge_count() == 1);
  CHECK(sels[1].subgraph == Subgraph::full(s.graph));
  CHECK_THROWS_AS(hisp_topk_sweep(n, s.graph, {units.size() + 1}), Error);

  const ZooModel z = build_or_gate_model();
  const CompGraph g(z.model.config(), Granularity::kHeadsQkvMlps);
  const TaskDataset d = gen_dataset("or-gate", 4, 0);
  const SubgraphEvaluator orv(z.model, g, d, AblationMode::kZero);
  const ImportanceTable raw = hisp_scores(orv, mask_units(g));
  const ImportanceTable norm = hisp_layer_normalize(raw);
  for (std::size_t k : {nonzero_units(raw), std::size_t{2}}) {
    const auto sel = hisp_topk_sweep(norm, g, {k})[0];
    CHECK(std::count(sel.nodes.begin(), sel.nodes.end(), NodeId::attn(0, 0)) == 0);
    CHECK(std::count(sel.nodes.begin(), sel.nodes.end(), NodeId::attn(0, 1)) == 0);
  }
}
