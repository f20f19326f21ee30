#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autocirc/dataset.hpp"
#include "autocirc/eval.hpp"
#include "autocirc/graph.hpp"
#include "autocirc/model.hpp"

namespace autocirc {

struct ZooModel {
  Model model;
  CanonicalCircuit circuit;  // at heads-qkv granularity
};

/// Drops q/k/v distinctions when targeting the coarser granularity.
CanonicalCircuit project_circuit(const CanonicalCircuit& circuit, Granularity granularity);

/// 1 layer, 2 heads, ReLU MLP computing 1 - ReLU(1 - x - y) on the two head
/// outputs x, y (each head writes a constant 1). The model dimension is 2: one
/// dimension carries the heads' sum, the other the MLP's answer, so the
/// readout sees the OR alone.
ZooModel build_or_gate_model();

/// Sequence [x_0 .. x_{n-1}, Q x n] with query token id `vocab`; answer
/// position n + i decodes x_{n-1-i}. Layer-0 head 0 gathers the mirrored token
/// by one-hot position, MLP 0 copies it to the readout; every other component
/// writes only to scratch dimensions.
ZooModel build_reverse_model(std::size_t n, std::size_t vocab);

/// Tokens a=0, b=1, x=2. MLP 0 flags x, layer-1 head 0 averages the flag over
/// the causal prefix, and logit 0 reads the average.
ZooModel build_xproportion_model(std::size_t n);

struct TaskParams {
  std::size_t reverse_len = 4;
  std::size_t reverse_vocab = 4;
  std::size_t xprop_len = 5;
  std::size_t induction_half = 12;
  std::size_t induction_vocab = 64;
};

/// Tasks: or-gate, reverse, xproportion, induction.
TaskDataset gen_dataset(const std::string& task, std::size_t n, std::uint64_t seed,
                        const TaskParams& params = {});

/// Model config and canonical circuit for a compiled task.
ZooModel build_task_model(const std::string& task, const TaskParams& params = {});

struct TrainConfig {
  std::size_t vocab = 64;
  std::size_t half = 12;
  std::uint32_t d_model = 32;
  std::uint32_t d_head = 8;
  std::uint32_t n_heads = 8;
  std::uint32_t n_layers = 2;
  std::size_t steps = 400;
  std::size_t batch = 16;
  double learning_rate = 3e-3;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  ModelConfig model_config() const;
};

struct TrainLog {
  std::vector<double> loss;
};

/// Adam on next-token NLL at the induction positions of fresh r + r
/// sequences. Throws a training error naming the step on divergence.
Model train_induction(const TrainConfig& config, TrainLog* log = nullptr);

/// Initial weights used by train_induction.
Model induction_init(const TrainConfig& config);

/// Positions t-1 for every t whose token repeats the continuation of an
/// earlier occurrence of token t-1.
std::vector<std::size_t> induction_positions(const TokenSeq& seq);

/// Mean NLL of the correct next token at the dataset's measured positions.
double mean_nll(const Model& model, const TaskDataset& dataset);

/// Whether the subgraph contains a layer-0 head -> layer-1 head k or v edge.
bool has_induction_composition(const Subgraph& h);

/// Stored canonical circuit for a compiled task; usage error otherwise.
CanonicalCircuit canonical_circuit(const std::string& task, const TaskParams& params = {});

}  // namespace autocirc
