#include <cmath>
#include <deque>
#include <functional>
#include <map>

#include "autocirc/error.hpp"
#include "autocirc/patchexec.hpp"
#include "autocirc/zoo.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace autocirc;
using num::Slot;
using num::Tape;
using num::Tensor;

namespace {

/// Reference assembly written directly from the edge semantics: every slot
/// sums, over its incoming edges, the in-progress clean contribution (edge
/// kept) or the corrupted one (edge dropped; nothing in zero mode). MLPs and
/// the output also read the clean positional embedding.
class OracleHooks : public ForwardHooks {
 public:
  OracleHooks(const CompGraph& g, const Subgraph& h, AblationMode mode, const ExampleActivations* corrupt)
      : g_(g), h_(h), mode_(mode), corrupt_(corrupt) {}

  Slot assemble(Tape& tape, const NodeId& dst, InputSlot slot) override {
    const InputSlot s = g_.granularity() == Granularity::kHeadsMlps ? InputSlot::kIn : slot;
    std::optional<Slot> acc;
    auto add = [&](Slot t) { acc = acc ? tape.add(*acc, t) : t; };
    for (std::size_t e : g_.incoming(dst, s)) {
      const NodeId& src = g_.edge(e).src;
      if (h_.contains(e)) add(clean_.at(src));
      else if (mode_ == AblationMode::kCorrupted)
        add(tape.constant(corrupt_->contributions[node_index(g_.config(), src)]));
    }
    if (dst.kind != NodeKind::kHead && g_.config().has_pos()) add(clean_.at(NodeId::pos()));
    if (!acc) {
      zeros_.emplace_back(tape.value(clean_.at(NodeId::tok())).shape());
      acc = tape.constant(zeros_.back());
    }
    return *acc;
  }

  Slot on_output(Tape&, const NodeId& node, Slot c) override {
    clean_[node] = c;
    return c;
  }

 private:
  const CompGraph& g_;
  const Subgraph& h_;
  AblationMode mode_;
  const ExampleActivations* corrupt_;
  std::map<NodeId, Slot> clean_;
  std::deque<Tensor> zeros_;
};

Tensor oracle_run(const Model& m, const CompGraph& g, const Subgraph& h, const TokenSeq& clean, AblationMode mode,
                  const ExampleActivations* corrupt) {
  Tape tape(false);
  const WeightSlots w = bind_weights(tape, m, false);
  OracleHooks hooks(g, h, mode, corrupt);
  return tape.value(run_forward(tape, m, w, clean, {}, hooks));
}

Subgraph random_subgraph(const CompGraph& g, Rng& rng) {
  Subgraph h = Subgraph::empty(g);
  for (std::size_t e = 0; e < g.edge_count(); ++e) h.set(e, rng.below(2) == 0);
  return h;
}

}  // namespace

TEST_CASE("full and empty subgraphs reproduce the clean and corrupted runs") {
  Rng rng(41);
  for (int trial = 0; trial < 40; ++trial) {
    const ModelConfig c = testutil::random_config(rng);
    const Model m = Model::random(c, rng.next());
    const TaskDataset d = testutil::random_dataset(rng, c, 2, 5);
    const ActivationCache cache = build_corrupt_cache(m, d);
    for (Granularity gran : {Granularity::kHeadsMlps, Granularity::kHeadsQkvMlps}) {
      const CompGraph g(c, gran);
      for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& ex = d.examples[i];
        const Tensor full = run_subgraph(m, g, Subgraph::full(g), ex.clean, AblationMode::kCorrupted,
                                         &cache.examples[i]).logits;
        CHECK(num::max_abs_diff(full, forward_example(m, ex.clean).logits) <= 1e-9);
        const Tensor empty = run_subgraph(m, g, Subgraph::empty(g), ex.clean, AblationMode::kCorrupted,
                                          &cache.examples[i]).logits;
        CHECK(num::max_abs_diff(empty, forward_example(m, ex.corrupted).logits) <= 1e-9);
      }
    }
  }
}

TEST_CASE("random subgraphs match the reference assembly") {
  Rng rng(42);
  for (int trial = 0; trial < 40; ++trial) {
    const ModelConfig c = testutil::random_config(rng);
    const Model m = Model::random(c, rng.next());
    const TaskDataset d = testutil::random_dataset(rng, c, 1, 5);
    const ActivationCache cache = build_corrupt_cache(m, d);
    for (Granularity gran : {Granularity::kHeadsMlps, Granularity::kHeadsQkvMlps}) {
      const CompGraph g(c, gran);
      const Subgraph h = random_subgraph(g, rng);
      for (AblationMode mode : {AblationMode::kCorrupted, AblationMode::kZero}) {
        const ExampleActivations* cor = mode == AblationMode::kCorrupted ? &cache.examples[0] : nullptr;
        const Tensor got = run_subgraph(m, g, h, d.examples[0].clean, mode, cor).logits;
        CHECK(num::max_abs_diff(got, oracle_run(m, g, h, d.examples[0].clean, mode, cor)) <= 1e-9);
      }
      const Tensor zero_empty =
          run_subgraph(m, g, Subgraph::empty(g), d.examples[0].clean, AblationMode::kZero, nullptr).logits;
      CHECK(num::max_abs_diff(zero_empty, oracle_run(m, g, Subgraph::empty(g), d.examples[0].clean,
                                                     AblationMode::kZero, nullptr)) <= 1e-9);
    }
  }
}

TEST_CASE("OR gate with one head->MLP edge removed under zero ablation") {
  const ZooModel z = build_or_gate_model();
  const CompGraph g(z.model.config(), Granularity::kHeadsQkvMlps);
  const TokenSeq x{0};
  Subgraph h = Subgraph::full(g);
  CHECK(run_subgraph(z.model, g, h, x, AblationMode::kZero, nullptr).logits.at(0, 1) == doctest::Approx(1.0));
  h.set(*g.find_edge("a0.h1->m0.in"), false);
  CHECK(run_subgraph(z.model, g, h, x, AblationMode::kZero, nullptr).logits.at(0, 1) == doctest::Approx(1.0));
  h.set(*g.find_edge("a0.h0->m0.in"), false);
  CHECK(run_subgraph(z.model, g, h, x, AblationMode::kZero, nullptr).logits.at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("corrupted caches") {
  Rng rng(43);
  const ModelConfig c = testutil::random_config(rng);
  const Model m = Model::random(c, 9);
  const std::vector<TokenSeq> x{testutil::random_tokens(rng, 4, c.vocab), testutil::random_tokens(rng, 4, c.vocab)};
  const ActivationCache same = build_corrupt_cache(m, x, x);
  const ForwardResult clean = forward(m, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(same.examples[i].logits == clean.cache.examples[i].logits);
    CHECK(same.examples[i].contributions == clean.cache.examples[i].contributions);
  }
  const std::vector<TokenSeq> shorter{TokenSeq{0, 1, 2}, x[1]};
  CHECK_THROWS_AS(build_corrupt_cache(m, x, shorter), Error);
  try {
    build_corrupt_cache(m, x, {x[0]});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kPairing);
  }

  TaskDataset d = gen_dataset("reverse", 6, 3);
  const ZooModel rev = build_task_model("reverse");
  const ActivationCache rc = build_corrupt_cache(rev.model, d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(rc.examples[i].logits == forward_example(rev.model, d.examples[i].corrupted, d.examples[i].corrupted_pos).logits);
  }
}

TEST_CASE("evaluate_subgraph identities") {
  Rng rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig c = testutil::random_config(rng);
    const Model m = Model::random(c, rng.next());
    const CompGraph g(c, Granularity::kHeadsQkvMlps);
    TaskDataset d = testutil::random_dataset(rng, c, 4, 5);
    CHECK(std::abs(evaluate_subgraph(m, g, Subgraph::full(g), d, AblationMode::kCorrupted)) <= 1e-9);
    const Subgraph h = random_subgraph(g, rng);
    const double a = evaluate_subgraph(m, g, h, d, AblationMode::kCorrupted);
    std::reverse(d.examples.begin(), d.examples.end());
    CHECK(std::abs(evaluate_subgraph(m, g, h, d, AblationMode::kCorrupted) - a) <= 1e-12);
    const SubgraphEvaluator one(m, g, d, AblationMode::kCorrupted, nullptr, 1);
    const SubgraphEvaluator two(m, g, d, AblationMode::kCorrupted, nullptr, 3);
    CHECK(one.evaluate(h) == two.evaluate(h));
  }

  const ZooModel rev = build_task_model("reverse");
  const CompGraph rg(rev.model.config(), Granularity::kHeadsQkvMlps);
  CHECK(evaluate_subgraph(rev.model, rg, Subgraph::full(rg), gen_dataset("reverse", 8, 1), AblationMode::kCorrupted) <=
        1e-9);

  // Single position, hand-specified distributions: P = [1/2, 1/2] on the clean
  // token, Q = [1/4, 3/4] on the corrupted one.
  ModelConfig c;
  c.n_layers = 0;
  c.vocab = 2;
  c.d_model = 2;
  c.n_ctx = 1;
  c.pos_embed = PosEmbedKind::kNone;
  Model m = Model::zeros(c);
  m.weight("embed.W_E") = Tensor::matrix({{0.0, 0.0}, {0.0, std::log(3.0)}});
  m.weight("unembed.W_U") = Tensor::identity(2);
  const CompGraph g(c, Granularity::kHeadsQkvMlps);
  TaskDataset d;
  d.metric = MetricKind::kKl;
  TaskExample ex;
  ex.clean = {0};
  ex.corrupted = {1};
  ex.targets.positions = {0};
  d.examples.push_back(ex);
  const double closed = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(evaluate_subgraph(m, g, Subgraph::empty(g), d, AblationMode::kCorrupted) == doctest::Approx(closed).epsilon(1e-12));

  TaskDataset none;
  CHECK_THROWS_AS(evaluate_subgraph(m, g, Subgraph::full(g), none, AblationMode::kCorrupted), Error);
}
