#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autocirc/node_id.hpp"
#include "autocirc/numerics.hpp"
#include "autocirc/tape.hpp"

namespace autocirc {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

enum class NormKind { kNone, kPreLayerNorm };
enum class PosEmbedKind { kNone, kLearned, kOneHot };

struct ModelConfig {
  std::uint32_t n_layers = 1;
  std::uint32_t n_heads = 1;
  std::uint32_t d_model = 8;
  std::uint32_t d_head = 4;
  std::uint32_t d_mlp = 0;  // 0 means attention-only
  std::uint32_t vocab = 8;
  std::uint32_t n_ctx = 8;
  num::Activation activation = num::Activation::kGelu;
  NormKind norm = NormKind::kNone;
  PosEmbedKind pos_embed = PosEmbedKind::kLearned;
  double attn_scale = 0.5;
  double ln_eps = 1e-5;

  bool has_mlp() const { return d_mlp > 0; }
  bool has_pos() const { return pos_embed != PosEmbedKind::kNone; }
  bool has_norm() const { return norm == NormKind::kPreLayerNorm; }

  /// Throws a usage error when a field is out of range.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

double default_attn_scale(std::uint32_t d_head);

std::string_view to_string(num::Activation a);
std::string_view to_string(NormKind n);
std::string_view to_string(PosEmbedKind p);
num::Activation parse_activation(std::string_view s);
NormKind parse_norm(std::string_view s);
PosEmbedKind parse_pos_embed(std::string_view s);

/// Required weight names and shapes for a config, in canonical order.
std::vector<std::pair<std::string, num::Shape>> required_weights(const ModelConfig& config);

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::map<std::string, num::Tensor> weights);

  /// Zero-initialised weights of the documented shapes (layernorm gains at 1).
  static Model zeros(const ModelConfig& config);
  /// Gaussian weights with standard deviation `scale`; deterministic per seed.
  static Model random(const ModelConfig& config, std::uint64_t seed, double scale = 0.5);

  const ModelConfig& config() const { return config_; }
  const num::Tensor& weight(const std::string& name) const;
  num::Tensor& weight(const std::string& name);
  const std::map<std::string, num::Tensor>& weights() const { return weights_; }

  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  std::map<std::string, num::Tensor> weights_;
};

/// Nodes in forward order: tok, pos (if any), per layer heads then MLP, out.
std::vector<NodeId> forward_nodes(const ModelConfig& config);
std::size_t node_index(const ModelConfig& config, const NodeId& node);

/// Weight tensors placed on a tape, either as trainable leaves or as
/// borrowed constants.
struct WeightSlots {
  std::map<std::string, num::Slot> slots;
  num::Slot operator[](const std::string& name) const { return slots.at(name); }
};

WeightSlots bind_weights(num::Tape& tape, const Model& model, bool trainable);

/// Interception points of a forward pass. The executor asks `assemble` for the
/// residual input of every destination slot (heads are asked for q, k and v
/// separately; MLPs and the output for kIn) and reports every contribution
/// written to the residual stream through `on_output`.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  virtual num::Slot assemble(num::Tape& tape, const NodeId& dst, InputSlot slot) = 0;
  virtual num::Slot on_output(num::Tape& tape, const NodeId& node, num::Slot contribution) {
    (void)tape;
    (void)node;
    return contribution;
  }
  virtual num::Slot on_qkv(num::Tape& tape, const NodeId& head, InputSlot which, num::Slot value) {
    (void)tape;
    (void)head;
    (void)which;
    return value;
  }
};

/// Standard residual stream: every slot reads the running sum of all
/// contributions written so far.
class ResidualHooks : public ForwardHooks {
 public:
  num::Slot assemble(num::Tape& tape, const NodeId& dst, InputSlot slot) override;
  num::Slot on_output(num::Tape& tape, const NodeId& node, num::Slot contribution) override;

 private:
  bool started_ = false;
  num::Slot resid_{};
};

void check_tokens(const ModelConfig& config, std::span<const Token> tokens);

/// Runs one sequence through the model on `tape` and returns the logits slot
/// ([T, vocab]). `pos_rows` overrides which positional-embedding rows are
/// used (empty means 0..T-1).
num::Slot run_forward(num::Tape& tape, const Model& model, const WeightSlots& weights,
                      std::span<const Token> tokens, std::span<const std::size_t> pos_rows,
                      ForwardHooks& hooks);

struct ExampleActivations {
  std::vector<num::Tensor> contributions;  // by node_index; the out entry is empty
  std::vector<num::Tensor> qkv;            // (layer * n_heads + head) * 3 + {q,k,v}
  std::vector<num::Tensor> resid;          // residual before each layer, then before unembed
  std::vector<num::Tensor> mlp_inputs;     // assembled MLP input per layer (pre-norm)
  num::Tensor logits;
};

struct ActivationCache {
  ModelConfig config;
  std::vector<ExampleActivations> examples;
};

ExampleActivations forward_example(const Model& model, std::span<const Token> tokens,
                                   std::span<const std::size_t> pos_rows = {});

struct ForwardResult {
  num::Tensor logits;  // [batch, T, vocab]
  ActivationCache cache;
};

ForwardResult forward(const Model& model, const std::vector<TokenSeq>& batch);

/// The additive term `src` writes into the residual stream, per position.
const num::Tensor& node_contribution(const ActivationCache& cache, std::size_t example,
                                     const NodeId& src);

std::size_t qkv_index(const ModelConfig& config, std::uint32_t layer, std::uint32_t head,
                      InputSlot which);

Model load_model(const std::filesystem::path& path);
void save_model(const Model& model, const std::filesystem::path& path);

}  // namespace autocirc
