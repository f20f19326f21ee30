#include "autocirc/patchexec.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "autocirc/error.hpp"

namespace autocirc {

using num::Slot;
using num::Tape;
using num::Tensor;

std::string_view to_string(AblationMode m) { return m == AblationMode::kCorrupted ? "corrupted" : "zero"; }

AblationMode parse_ablation(std::string_view s) {
  if (s == "corrupted") return AblationMode::kCorrupted;
  if (s == "zero") return AblationMode::kZero;
  fail(ErrorKind::kUsage, "unknown ablation mode '" + std::string(s) + "'");
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

ActivationCache build_corrupt_cache(const Model& model, const TaskDataset& dataset) {
  ActivationCache cache;
  cache.config = model.config();
  cache.examples.resize(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const TaskExample& ex = dataset.examples[i];
    require(ex.corrupted.size() == ex.clean.size(), ErrorKind::kPairing,
            "example " + std::to_string(i) + ": corrupted length differs from clean");
    cache.examples[i] = forward_example(model, ex.corrupted, ex.corrupted_pos);
  }
  return cache;
}

ActivationCache build_corrupt_cache(const Model& model, const std::vector<TokenSeq>& clean,
                                    const std::vector<TokenSeq>& corrupted) {
  require(clean.size() == corrupted.size(), ErrorKind::kPairing, "corrupted batch size differs from clean");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    require(clean[i].size() == corrupted[i].size(), ErrorKind::kPairing,
            "corrupted sequence " + std::to_string(i) + " differs in length from clean");
  }
  return forward(model, corrupted).cache;
}

PatchHooks::PatchHooks(const CompGraph& graph, const Subgraph* subgraph, AblationMode mode,
                       const ExampleActivations* corrupt)
    : graph_(graph), subgraph_(subgraph), mode_(mode), corrupt_(corrupt) {
  require(subgraph == nullptr || &subgraph->graph() == &graph, ErrorKind::kUsage,
          "subgraph belongs to a different graph");
  require(mode != AblationMode::kCorrupted || corrupt != nullptr, ErrorKind::kPairing,
          "corrupted ablation needs a corrupted cache");
  clean_.resize(graph.nodes().size());
  dirty_.resize(graph.nodes().size());
}

Slot PatchHooks::corrupted_contribution(Tape& tape, const NodeId& node) {
  const std::size_t i = node_index(graph_.config(), node);
  if (!dirty_[i]) {
    const Tensor& t = corrupt_->contributions.at(i);
    require(t.rank() == 2 && t.extent(0) == seq_len_, ErrorKind::kPairing,
            "corrupted cache does not match the clean sequence shape");
    dirty_[i] = tape.constant(t);
  }
  return *dirty_[i];
}

Slot PatchHooks::assemble(Tape& tape, const NodeId& dst, InputSlot slot) {
  const ModelConfig& c = graph_.config();
  const InputSlot site =
      dst.kind == NodeKind::kHead && graph_.granularity() == Granularity::kHeadsMlps ? InputSlot::kIn : slot;
  const auto& in = graph_.incoming(dst, site);
  std::optional<Slot> sum;
  auto accumulate = [&](Slot term) { sum = sum ? tape.add(*sum, term) : term; };
  // Reverse of parent order is forward order, the order the plain residual
  // stream accumulates in.
  for (auto it = in.rbegin(); it != in.rend(); ++it) {
    const Edge& e = graph_.edge(*it);
    const std::size_t src = node_index(c, e.src);
    if (subgraph_ == nullptr || subgraph_->contains(*it)) {
      accumulate(*clean_[src]);
    } else if (mode_ == AblationMode::kCorrupted) {
      accumulate(corrupted_contribution(tape, e.src));
    }
    if (e.src.kind == NodeKind::kTokEmbed && dst.kind != NodeKind::kHead && c.has_pos()) {
      accumulate(*clean_[node_index(c, NodeId::pos())]);
    }
  }
  if (!sum) return tape.leaf(Tensor({seq_len_, static_cast<std::size_t>(c.d_model)}));
  return *sum;
}

Slot PatchHooks::on_output(Tape& tape, const NodeId& node, Slot contribution) {
  if (node.kind == NodeKind::kTokEmbed) seq_len_ = tape.value(contribution).extent(0);
  clean_[node_index(graph_.config(), node)] = contribution;
  return contribution;
}

PatchedOutput run_subgraph(const Model& model, const CompGraph& graph, const Subgraph& subgraph,
                           std::span<const Token> clean, AblationMode mode,
                           const ExampleActivations* corrupt) {
  require(graph.config() == model.config(), ErrorKind::kUsage, "graph was built for a different model config");
  Tape tape(false);
  WeightSlots w = bind_weights(tape, model, false);
  PatchHooks hooks(graph, &subgraph, mode, corrupt);
  Slot logits = run_forward(tape, model, w, clean, {}, hooks);
  PatchedOutput out{tape.value(logits)};
  num::check_finite(out.logits, "patched logits");
  return out;
}

SubgraphEvaluator::SubgraphEvaluator(const Model& model, const CompGraph& graph,
                                     const TaskDataset& dataset, AblationMode mode,
                                     const Model* reference, unsigned threads)
    : model_(model), graph_(graph), dataset_(dataset), mode_(mode), threads_(threads) {
  require(!dataset.examples.empty(), ErrorKind::kUsage, "dataset has no examples");
  require(graph.config() == model.config(), ErrorKind::kUsage, "graph was built for a different model config");
  dataset.validate(model.config());
  if (mode == AblationMode::kCorrupted) corrupt_ = build_corrupt_cache(model, dataset);
  const Model& ref = reference ? *reference : model;
  require(ref.config() == model.config(), ErrorKind::kUsage, "reference model config differs");
  reference_.resize(dataset.size());
  parallel_for(dataset.size(), threads_, [&](std::size_t i) {
    reference_[i] = forward_example(ref, dataset.examples[i].clean).logits;
  });
  for (const auto& ex : dataset.examples) total_positions_ += ex.targets.positions.size();
}

std::vector<Tensor> SubgraphEvaluator::outputs(const Subgraph& subgraph) const {
  std::vector<Tensor> out(dataset_.size());
  parallel_for(dataset_.size(), threads_, [&](std::size_t i) {
    const ExampleActivations* corrupt = mode_ == AblationMode::kCorrupted ? &corrupt_.examples[i] : nullptr;
    out[i] = run_subgraph(model_, graph_, subgraph, dataset_.examples[i].clean, mode_, corrupt).logits;
  });
  return out;
}

double SubgraphEvaluator::evaluate(const Subgraph& subgraph) const {
  const auto logits = outputs(subgraph);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += metric_sum(dataset_.metric, logits[i], reference_[i], dataset_.examples[i].targets);
  }
  ++evaluations_;
  return total / static_cast<double>(total_positions_);
}

double evaluate_subgraph(const Model& model, const CompGraph& graph, const Subgraph& subgraph,
                         const TaskDataset& dataset, AblationMode mode, const Model* reference) {
  return SubgraphEvaluator(model, graph, dataset, mode, reference).evaluate(subgraph);
}

}  // namespace autocirc
