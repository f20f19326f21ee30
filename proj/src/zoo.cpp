#include "autocirc/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "autocirc/error.hpp"
#include "autocirc/patchexec.hpp"
#include "autocirc/rng.hpp"

namespace autocirc {

using num::Slot;
using num::Tape;
using num::Tensor;

namespace {

/// Write helpers over a zero-initialised model.
struct Builder {
  Model m;

  explicit Builder(const ModelConfig& c) : m(Model::zeros(c)) {}

  void set(const std::string& name, std::initializer_list<std::size_t> idx, double v) {
    Tensor& t = m.weight(name);
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      require(i < t.extent(axis), ErrorKind::kDimension, "builder index out of range for " + name);
      flat = flat * t.extent(axis) + i;
      ++axis;
    }
    t[flat] = v;
  }
  static std::string blk(std::uint32_t l, const std::string& rest) {
    return "blocks." + std::to_string(l) + "." + rest;
  }
};

std::string edge(const std::string& src, const std::string& dst) { return src + "->" + dst; }

}  // namespace

CanonicalCircuit project_circuit(const CanonicalCircuit& circuit, Granularity granularity) {
  if (granularity == Granularity::kHeadsQkvMlps) return circuit;
  CanonicalCircuit out{{}, circuit.provenance};
  std::set<std::string> seen;
  for (const std::string& s : circuit.edges) {
    auto e = parse_edge(s);
    require(e.has_value(), ErrorKind::kIdentifier, "bad edge '" + s + "'");
    e->slot = InputSlot::kIn;
    const std::string t = to_string(*e);
    if (seen.insert(t).second) out.edges.push_back(t);
  }
  return out;
}

ZooModel build_or_gate_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 2;
  c.d_head = 1;
  c.d_mlp = 1;
  c.vocab = 2;
  c.n_ctx = 1;
  c.activation = num::Activation::kRelu;
  c.norm = NormKind::kNone;
  c.pos_embed = PosEmbedKind::kNone;
  c.attn_scale = 1.0;
  Builder b(c);
  for (std::size_t h = 0; h < 2; ++h) b.set(Builder::blk(0, "attn.b_O"), {h, 0}, 1.0);
  b.set(Builder::blk(0, "mlp.W_in"), {0, 0}, -1.0);
  b.set(Builder::blk(0, "mlp.b_in"), {0}, 1.0);
  b.set(Builder::blk(0, "mlp.W_out"), {0, 1}, -1.0);
  b.set(Builder::blk(0, "mlp.b_out"), {1}, 1.0);
  b.set("unembed.W_U", {1, 1}, 1.0);
  return {std::move(b.m),
          {{edge("a0.h0", "m0.in"), edge("a0.h1", "m0.in"), edge("m0", "out.in")},
           "by construction: MLP 0 ORs the two head outputs"}};
}

ZooModel build_reverse_model(std::size_t n, std::size_t vocab) {
  require(n >= 1 && vocab >= 1, ErrorKind::kUsage, "reverse model needs n >= 1 and vocab >= 1");
  const std::size_t V = vocab;
  const std::size_t tok0 = 0, pos0 = V + 1, gath0 = pos0 + 2 * n, res0 = gath0 + V, scr0 = res0 + V;
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = static_cast<std::uint32_t>(scr0 + 2);
  c.d_head = static_cast<std::uint32_t>(std::max(2 * n, V));
  c.d_mlp = static_cast<std::uint32_t>(V);
  c.vocab = static_cast<std::uint32_t>(V + 1);
  c.n_ctx = static_cast<std::uint32_t>(2 * n);
  c.activation = num::Activation::kRelu;
  c.norm = NormKind::kNone;
  c.pos_embed = PosEmbedKind::kOneHot;
  c.attn_scale = 100.0;
  Builder b(c);
  for (std::size_t t = 0; t <= V; ++t) b.set("embed.W_E", {t, tok0 + t}, 1.0);
  for (std::size_t p = 0; p < 2 * n; ++p) b.set("pos_embed.W_pos", {p, pos0 + p}, 1.0);

  const std::string L0 = Builder::blk(0, "attn."), L1 = Builder::blk(1, "attn.");
  // a0.h0: answer position p attends to its mirror 2n-1-p; list positions to themselves.
  for (std::size_t p = 0; p < 2 * n; ++p) {
    const std::size_t target = p < n ? p : 2 * n - 1 - p;
    b.set(L0 + "W_Q", {0, pos0 + p, target}, 1.0);
    b.set(L0 + "W_K", {0, pos0 + p, p}, 1.0);
  }
  for (std::size_t t = 0; t < V; ++t) {
    b.set(L0 + "W_V", {0, tok0 + t, t}, 1.0);
    b.set(L0 + "W_O", {0, t, gath0 + t}, 1.0);
  }
  // MLP 0 copies the gathered one-hot to the readout.
  for (std::size_t t = 0; t < V; ++t) {
    b.set(Builder::blk(0, "mlp.W_in"), {gath0 + t, t}, 1.0);
    b.set(Builder::blk(0, "mlp.W_out"), {t, res0 + t}, 1.0);
    b.set("unembed.W_U", {res0 + t, t}, 1.0);
  }
  // Distractors: active computations whose writes land only in scratch.
  for (std::size_t p = 0; p < 2 * n; ++p) {
    b.set(L0 + "W_Q", {1, pos0 + p, p}, 1.0);
    b.set(L0 + "W_K", {1, pos0 + p, p}, 1.0);
  }
  for (std::size_t t = 0; t < V; ++t) {
    b.set(L0 + "W_V", {1, tok0 + t, 0}, 1.0);
    b.set(L1 + "W_V", {0, gath0 + t, t}, 1.0);
    b.set(L1 + "W_O", {0, t, scr0 + 1}, 1.0);
    b.set(L1 + "W_V", {1, tok0 + t, t}, 0.5);
    b.set(L1 + "W_O", {1, t, scr0}, 1.0);
    b.set(Builder::blk(1, "mlp.W_in"), {res0 + t, t}, 1.0);
    b.set(Builder::blk(1, "mlp.W_out"), {t, scr0 + 1}, 1.0);
  }
  b.set(L0 + "W_O", {1, 0, scr0}, 1.0);
  return {std::move(b.m),
          {{edge("pos", "a0.h0.q"), edge("pos", "a0.h0.k"), edge("tok", "a0.h0.v"), edge("a0.h0", "m0.in"),
            edge("m0", "out.in")},
           "by construction: positional mirror lookup in a0.h0, copy through m0"}};
}

ZooModel build_xproportion_model(std::size_t n) {
  require(n >= 1, ErrorKind::kUsage, "x-proportion model needs n >= 1");
  const std::size_t tok0 = 0, pos0 = 3, isx = pos0 + n, res = isx + 1, scr0 = res + 1;
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = static_cast<std::uint32_t>(scr0 + 2);
  c.d_head = static_cast<std::uint32_t>(std::max<std::size_t>(n, 2));
  c.d_mlp = 1;
  c.vocab = 3;
  c.n_ctx = static_cast<std::uint32_t>(n);
  c.activation = num::Activation::kRelu;
  c.norm = NormKind::kNone;
  c.pos_embed = PosEmbedKind::kOneHot;
  c.attn_scale = 1.0;
  Builder b(c);
  for (std::size_t t = 0; t < 3; ++t) b.set("embed.W_E", {t, tok0 + t}, 1.0);
  for (std::size_t p = 0; p < n; ++p) b.set("pos_embed.W_pos", {p, pos0 + p}, 1.0);

  const std::string L0 = Builder::blk(0, "attn."), L1 = Builder::blk(1, "attn.");
  b.set(Builder::blk(0, "mlp.W_in"), {tok0 + 2, 0}, 1.0);
  b.set(Builder::blk(0, "mlp.W_out"), {0, isx}, 1.0);
  // a1.h0: zero queries and keys give uniform causal attention.
  b.set(L1 + "W_V", {0, isx, 0}, 1.0);
  b.set(L1 + "W_O", {0, 0, res}, 1.0);
  b.set("unembed.W_U", {res, 0}, 1.0);
  // Distractors.
  b.set(L0 + "W_V", {0, tok0 + 0, 0}, 1.0);
  b.set(L0 + "W_O", {0, 0, scr0}, 1.0);
  for (std::size_t p = 0; p < n; ++p) {
    b.set(L0 + "W_Q", {1, pos0 + p, p}, 1.0);
    b.set(L0 + "W_K", {1, pos0 + p, p}, 1.0);
  }
  b.set(L0 + "W_V", {1, tok0 + 1, 0}, 1.0);
  b.set(L0 + "W_O", {1, 0, scr0 + 1}, 1.0);
  b.set(L1 + "W_V", {1, isx, 1}, 1.0);
  b.set(L1 + "W_O", {1, 1, scr0}, 1.0);
  b.set(Builder::blk(1, "mlp.W_in"), {res, 0}, 1.0);
  b.set(Builder::blk(1, "mlp.W_out"), {0, scr0 + 1}, 1.0);
  return {std::move(b.m),
          {{edge("tok", "m0.in"), edge("m0", "a1.h0.v"), edge("a1.h0", "out.in")},
           "by construction: m0 flags x, a1.h0 averages the flag"}};
}

ZooModel build_task_model(const std::string& task, const TaskParams& p) {
  if (task == "or-gate") return build_or_gate_model();
  if (task == "reverse") return build_reverse_model(p.reverse_len, p.reverse_vocab);
  if (task == "xproportion") return build_xproportion_model(p.xprop_len);
  fail(ErrorKind::kUsage, "no compiled model for task '" + task + "'");
}

CanonicalCircuit canonical_circuit(const std::string& task, const TaskParams& p) {
  if (task == "induction") {
    fail(ErrorKind::kUsage, "the induction circuit is a property check, not a stored edge list");
  }
  return build_task_model(task, p).circuit;
}

namespace {

std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  require(n >= 2, ErrorKind::kUsage, "a derangement needs at least 2 examples");
  while (true) {
    auto perm = rng.permutation(n);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) ok = ok && perm[i] != i;
    if (ok) return perm;
  }
}

/// Distinct random sequences drawn by `draw`.
std::vector<TokenSeq> distinct(std::size_t n, std::size_t space, Rng& rng,
                               const std::function<TokenSeq(Rng&)>& draw) {
  require(n <= space, ErrorKind::kUsage, "asked for more distinct examples than exist");
  std::set<TokenSeq> seen;
  std::vector<TokenSeq> out;
  while (out.size() < n) {
    TokenSeq s = draw(rng);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

std::size_t ipow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r = r > (std::size_t{1} << 40) ? r : r * b;
  return r;
}

void add_compiled_corruption(TaskDataset& d, std::size_t n_ctx, Rng& rng) {
  const auto perm = derangement(d.examples.size(), rng);
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    TaskExample& ex = d.examples[i];
    ex.corrupted = d.examples[perm[i]].clean;
    ex.corrupted_pos.resize(ex.clean.size());
    for (auto& p : ex.corrupted_pos) p = rng.below(n_ctx);
  }
}

}  // namespace

std::vector<std::size_t> induction_positions(const TokenSeq& seq) {
  std::vector<std::size_t> out;
  for (std::size_t t = 2; t < seq.size(); ++t) {
    for (std::size_t j = 0; j + 1 < t - 1; ++j) {
      if (seq[j] == seq[t - 1] && seq[j + 1] == seq[t]) {
        out.push_back(t - 1);
        break;
      }
    }
  }
  return out;
}

TaskDataset gen_dataset(const std::string& task, std::size_t n, std::uint64_t seed, const TaskParams& p) {
  require(n >= 1, ErrorKind::kUsage, "dataset needs at least one example");
  Rng rng(seed);
  TaskDataset d;
  d.task = task;
  if (task == "or-gate") {
    d.metric = MetricKind::kLogitDiff;
    for (std::size_t i = 0; i < n; ++i) {
      TaskExample ex{{0}, {0}, {}, {}};
      ex.targets.positions = {0};
      ex.targets.correct = {{1}};
      ex.targets.incorrect = {{0}};
      d.examples.push_back(ex);
    }
    return d;
  }
  if (task == "reverse") {
    require(n >= 2, ErrorKind::kUsage, "reverse datasets need n >= 2 for a derangement");
    const std::size_t L = p.reverse_len, V = p.reverse_vocab;
    d.metric = MetricKind::kL2;
    auto seqs = distinct(n, ipow(V, L), rng, [&](Rng& r) {
      TokenSeq s;
      for (std::size_t i = 0; i < L; ++i) s.push_back(static_cast<Token>(r.below(V)));
      for (std::size_t i = 0; i < L; ++i) s.push_back(static_cast<Token>(V));
      return s;
    });
    for (auto& s : seqs) {
      TaskExample ex{s, {}, {}, {}};
      for (std::size_t i = 0; i < L; ++i) {
        ex.targets.positions.push_back(L + i);
        std::vector<double> t(V + 1, 0.0);
        t[s[L - 1 - i]] = 1.0;
        ex.targets.target.push_back(t);
      }
      d.examples.push_back(std::move(ex));
    }
    add_compiled_corruption(d, 2 * L, rng);
    return d;
  }
  if (task == "xproportion") {
    require(n >= 2, ErrorKind::kUsage, "x-proportion datasets need n >= 2 for a derangement");
    const std::size_t L = p.xprop_len;
    d.metric = MetricKind::kL2;
    auto seqs = distinct(n, ipow(3, L), rng, [&](Rng& r) {
      TokenSeq s;
      for (std::size_t i = 0; i < L; ++i) s.push_back(static_cast<Token>(r.below(3)));
      return s;
    });
    for (auto& s : seqs) {
      TaskExample ex{s, {}, {}, {}};
      double xs = 0.0;
      for (std::size_t t = 0; t < L; ++t) {
        xs += s[t] == 2 ? 1.0 : 0.0;
        ex.targets.positions.push_back(t);
        ex.targets.target.push_back({xs / static_cast<double>(t + 1), 0.0, 0.0});
      }
      d.examples.push_back(std::move(ex));
    }
    add_compiled_corruption(d, L, rng);
    return d;
  }
  if (task == "induction") {
    const std::size_t m = p.induction_half, V = p.induction_vocab;
    require(m >= 2 && m <= V, ErrorKind::kUsage, "induction half length must be in [2, vocab]");
    d.metric = MetricKind::kKl;
    for (std::size_t i = 0; i < n; ++i) {
      auto perm = rng.permutation(V);
      TaskExample ex;
      for (std::size_t k = 0; k < 2 * m; ++k) ex.clean.push_back(static_cast<Token>(perm[k % m]));
      for (std::size_t k = 0; k < 2 * m; ++k) ex.corrupted.push_back(static_cast<Token>(rng.below(V)));
      for (std::size_t pos = m; pos + 1 < 2 * m; ++pos) {
        ex.targets.positions.push_back(pos);
        ex.targets.correct.push_back({ex.clean[pos + 1]});
        ex.targets.incorrect.push_back({ex.clean[pos]});
      }
      d.examples.push_back(std::move(ex));
    }
    return d;
  }
  fail(ErrorKind::kUsage, "unknown task '" + task + "'");
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_model = d_model;
  c.d_head = d_head;
  c.d_mlp = 0;
  c.vocab = static_cast<std::uint32_t>(vocab);
  c.n_ctx = static_cast<std::uint32_t>(2 * half);
  c.activation = num::Activation::kIdentity;
  c.norm = NormKind::kPreLayerNorm;
  c.pos_embed = PosEmbedKind::kLearned;
  c.attn_scale = default_attn_scale(d_head);
  return c;
}

Model induction_init(const TrainConfig& config) {
  Model m = Model::random(config.model_config(), config.seed, config.init_scale);
  for (const auto& [name, t] : m.weights()) {
    const std::string leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "b" || leaf.rfind("b_", 0) == 0) {
      Tensor& w = m.weight(name);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    }
  }
  return m;
}

Model train_induction(const TrainConfig& config, TrainLog* log) {
  require(config.steps >= 1 && config.batch >= 1 && config.learning_rate > 0.0, ErrorKind::kUsage,
          "invalid training config");
  Model model = induction_init(config);
  std::vector<std::string> names;
  for (const auto& [name, t] : model.weights()) names.push_back(name);
  std::vector<Tensor> m1, m2;
  for (const auto& name : names) {
    m1.emplace_back(model.weight(name).shape());
    m2.emplace_back(model.weight(name).shape());
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  TaskParams params;
  params.induction_half = config.half;
  params.induction_vocab = config.vocab;
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  for (std::size_t step = 0; step < config.steps; ++step) {
    const TaskDataset batch = gen_dataset("induction", config.batch, rng.next(), params);
    std::vector<double> losses(config.batch, 0.0);
    std::vector<std::vector<Tensor>> grads(config.batch);
    std::size_t positions = 0;
    for (const auto& ex : batch.examples) positions += ex.targets.positions.size();
    parallel_for(config.batch, config.threads, [&](std::size_t i) {
      const TaskExample& ex = batch.examples[i];
      Tape tape(true);
      WeightSlots w = bind_weights(tape, model, true);
      ResidualHooks hooks;
      Slot logits = run_forward(tape, model, w, ex.clean, {}, hooks);
      Slot loss = metric_sum_on_tape(tape, MetricKind::kNll, logits, Tensor(), ex.targets);
      losses[i] = tape.value(loss).item();
      std::vector<Slot> wrt;
      for (const auto& name : names) wrt.push_back(w[name]);
      grads[i] = tape.reverse_grad(loss, wrt);
    });
    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(positions);
    require(std::isfinite(loss) && loss < 1e3, ErrorKind::kTraining,
            "training diverged at step " + std::to_string(step));
    if (log) log->loss.push_back(loss);

    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
    for (std::size_t k = 0; k < names.size(); ++k) {
      Tensor& w = model.weight(names[k]);
      for (std::size_t j = 0; j < w.size(); ++j) {
        double g = 0.0;
        for (std::size_t i = 0; i < config.batch; ++i) g += grads[i][k][j];
        g /= static_cast<double>(positions);
        m1[k][j] = b1 * m1[k][j] + (1.0 - b1) * g;
        m2[k][j] = b2 * m2[k][j] + (1.0 - b2) * g * g;
        w[j] -= config.learning_rate * (m1[k][j] / c1) / (std::sqrt(m2[k][j] / c2) + eps);
      }
    }
  }
  return model;
}

double mean_nll(const Model& model, const TaskDataset& dataset) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : dataset.examples) {
    const Tensor logits = forward_example(model, ex.clean).logits;
    total += metric_sum(MetricKind::kNll, logits, logits, ex.targets);
    count += ex.targets.positions.size();
  }
  return total / static_cast<double>(count);
}

bool has_induction_composition(const Subgraph& h) {
  for (std::size_t e : h.edge_indices()) {
    const Edge& edge = h.graph().edge(e);
    if (edge.src.kind == NodeKind::kHead && edge.src.layer == 0 && edge.dst.kind == NodeKind::kHead &&
        edge.dst.layer == 1 && (edge.slot == InputSlot::kK || edge.slot == InputSlot::kV)) {
      return true;
    }
  }
  return false;
}

}  // namespace autocirc
