#include "autocirc/model.hpp"

#include <array>
#include <cmath>

#include "autocirc/error.hpp"
#include "autocirc/rng.hpp"

namespace autocirc {

using num::Shape;
using num::Slot;
using num::Tape;
using num::Tensor;

void ModelConfig::validate() const {
  require(n_heads > 0 || n_layers == 0, ErrorKind::kUsage, "n_heads must be positive");
  require(d_model > 0, ErrorKind::kUsage, "d_model must be positive");
  require(d_head > 0 || n_layers == 0, ErrorKind::kUsage, "d_head must be positive");
  require(vocab > 0, ErrorKind::kUsage, "vocab must be positive");
  require(n_ctx > 0, ErrorKind::kUsage, "n_ctx must be positive");
  require(attn_scale > 0.0 && std::isfinite(attn_scale), ErrorKind::kUsage,
          "attn_scale must be positive");
  require(ln_eps > 0.0, ErrorKind::kUsage, "ln_eps must be positive");
}

double default_attn_scale(std::uint32_t d_head) { return 1.0 / std::sqrt(static_cast<double>(d_head)); }

std::string_view to_string(num::Activation a) {
  switch (a) {
    case num::Activation::kRelu: return "relu";
    case num::Activation::kGelu: return "gelu";
    case num::Activation::kIdentity: return "identity";
  }
  return "?";
}

std::string_view to_string(NormKind n) { return n == NormKind::kNone ? "none" : "pre-layernorm"; }

std::string_view to_string(PosEmbedKind p) {
  switch (p) {
    case PosEmbedKind::kNone: return "none";
    case PosEmbedKind::kLearned: return "learned";
    case PosEmbedKind::kOneHot: return "one-hot";
  }
  return "?";
}

num::Activation parse_activation(std::string_view s) {
  if (s == "relu") return num::Activation::kRelu;
  if (s == "gelu") return num::Activation::kGelu;
  if (s == "identity") return num::Activation::kIdentity;
  fail(ErrorKind::kFormat, "unknown activation '" + std::string(s) + "'");
}

NormKind parse_norm(std::string_view s) {
  if (s == "none") return NormKind::kNone;
  if (s == "pre-layernorm") return NormKind::kPreLayerNorm;
  fail(ErrorKind::kFormat, "unknown norm '" + std::string(s) + "'");
}

PosEmbedKind parse_pos_embed(std::string_view s) {
  if (s == "none") return PosEmbedKind::kNone;
  if (s == "learned") return PosEmbedKind::kLearned;
  if (s == "one-hot") return PosEmbedKind::kOneHot;
  fail(ErrorKind::kFormat, "unknown pos_embed '" + std::string(s) + "'");
}

std::vector<std::pair<std::string, Shape>> required_weights(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.W_E", Shape{c.vocab, c.d_model});
  if (c.has_pos()) out.emplace_back("pos_embed.W_pos", Shape{c.n_ctx, c.d_model});
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    if (c.has_norm()) {
      out.emplace_back(p + "ln1.w", Shape{c.d_model});
      out.emplace_back(p + "ln1.b", Shape{c.d_model});
    }
    for (const char* m : {"Q", "K", "V"}) {
      out.emplace_back(p + "attn.W_" + m, Shape{c.n_heads, c.d_model, c.d_head});
      out.emplace_back(p + "attn.b_" + m, Shape{c.n_heads, c.d_head});
    }
    out.emplace_back(p + "attn.W_O", Shape{c.n_heads, c.d_head, c.d_model});
    out.emplace_back(p + "attn.b_O", Shape{c.n_heads, c.d_model});
    if (c.has_mlp()) {
      if (c.has_norm()) {
        out.emplace_back(p + "ln2.w", Shape{c.d_model});
        out.emplace_back(p + "ln2.b", Shape{c.d_model});
      }
      out.emplace_back(p + "mlp.W_in", Shape{c.d_model, c.d_mlp});
      out.emplace_back(p + "mlp.b_in", Shape{c.d_mlp});
      out.emplace_back(p + "mlp.W_out", Shape{c.d_mlp, c.d_model});
      out.emplace_back(p + "mlp.b_out", Shape{c.d_model});
    }
  }
  if (c.has_norm()) {
    out.emplace_back("ln_final.w", Shape{c.d_model});
    out.emplace_back("ln_final.b", Shape{c.d_model});
  }
  out.emplace_back("unembed.W_U", Shape{c.d_model, c.vocab});
  out.emplace_back("unembed.b_U", Shape{c.vocab});
  return out;
}

Model::Model(ModelConfig config, std::map<std::string, Tensor> weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  for (const auto& [name, shape] : required_weights(config_)) {
    auto it = weights_.find(name);
    require(it != weights_.end(), ErrorKind::kFormat, "missing tensor " + name);
    require(it->second.shape() == shape, ErrorKind::kFormat,
            "tensor " + name + " has shape " + num::shape_string(it->second.shape()) +
                ", expected " + num::shape_string(shape));
    num::check_finite(it->second, "weight " + name);
  }
}

namespace {
bool is_gain(const std::string& name) {
  return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}
}  // namespace

Model Model::zeros(const ModelConfig& config) {
  std::map<std::string, Tensor> w;
  for (const auto& [name, shape] : required_weights(config)) {
    Tensor t(shape);
    if (is_gain(name)) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
    }
    w.emplace(name, std::move(t));
  }
  return Model(config, std::move(w));
}

Model Model::random(const ModelConfig& config, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::map<std::string, Tensor> w;
  for (const auto& [name, shape] : required_weights(config)) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    if (is_gain(name)) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += 1.0;
    }
    w.emplace(name, std::move(t));
  }
  return Model(config, std::move(w));
}

const Tensor& Model::weight(const std::string& name) const {
  auto it = weights_.find(name);
  require(it != weights_.end(), ErrorKind::kFormat, "missing tensor " + name);
  return it->second;
}

Tensor& Model::weight(const std::string& name) {
  auto it = weights_.find(name);
  require(it != weights_.end(), ErrorKind::kFormat, "missing tensor " + name);
  return it->second;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : weights_) n += t.size();
  return n;
}

std::vector<NodeId> forward_nodes(const ModelConfig& c) {
  std::vector<NodeId> nodes{NodeId::tok()};
  if (c.has_pos()) nodes.push_back(NodeId::pos());
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    for (std::uint32_t h = 0; h < c.n_heads; ++h) nodes.push_back(NodeId::attn(l, h));
    if (c.has_mlp()) nodes.push_back(NodeId::mlp(l));
  }
  nodes.push_back(NodeId::out());
  return nodes;
}

std::size_t node_index(const ModelConfig& c, const NodeId& node) {
  const std::size_t base = c.has_pos() ? 2 : 1;
  const std::size_t per_layer = c.n_heads + (c.has_mlp() ? 1 : 0);
  switch (node.kind) {
    case NodeKind::kTokEmbed: return 0;
    case NodeKind::kPosEmbed:
      require(c.has_pos(), ErrorKind::kIdentifier, "model has no positional embedding");
      return 1;
    case NodeKind::kHead:
      require(node.layer < c.n_layers && node.head < c.n_heads, ErrorKind::kIdentifier,
              "unknown node " + to_string(node));
      return base + node.layer * per_layer + node.head;
    case NodeKind::kMlp:
      require(c.has_mlp() && node.layer < c.n_layers, ErrorKind::kIdentifier,
              "unknown node " + to_string(node));
      return base + node.layer * per_layer + c.n_heads;
    case NodeKind::kOutput: return base + c.n_layers * per_layer;
  }
  fail(ErrorKind::kIdentifier, "unknown node kind");
}

std::size_t qkv_index(const ModelConfig& c, std::uint32_t layer, std::uint32_t head,
                      InputSlot which) {
  require(which != InputSlot::kIn, ErrorKind::kIdentifier, "qkv_index needs q, k or v");
  return (static_cast<std::size_t>(layer) * c.n_heads + head) * 3 + static_cast<std::size_t>(which);
}

WeightSlots bind_weights(Tape& tape, const Model& model, bool trainable) {
  WeightSlots w;
  for (const auto& [name, t] : model.weights()) {
    w.slots.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
  }
  return w;
}

Slot ResidualHooks::assemble(Tape&, const NodeId&, InputSlot) { return resid_; }

Slot ResidualHooks::on_output(Tape& tape, const NodeId&, Slot contribution) {
  resid_ = started_ ? tape.add(resid_, contribution) : contribution;
  started_ = true;
  return contribution;
}

void check_tokens(const ModelConfig& config, std::span<const Token> tokens) {
  require(!tokens.empty(), ErrorKind::kContext, "empty token sequence");
  require(tokens.size() <= config.n_ctx, ErrorKind::kContext,
          "sequence length " + std::to_string(tokens.size()) + " exceeds n_ctx " +
              std::to_string(config.n_ctx));
  for (Token t : tokens) {
    require(t < config.vocab, ErrorKind::kVocab,
            "token id " + std::to_string(t) + " outside vocab of " + std::to_string(config.vocab));
  }
}

namespace {

Slot maybe_norm(Tape& tape, const ModelConfig& c, const WeightSlots& w, const std::string& prefix,
                Slot x) {
  if (!c.has_norm()) return x;
  return tape.layer_norm(x, w[prefix + ".w"], w[prefix + ".b"], c.ln_eps);
}

}  // namespace

Slot run_forward(Tape& tape, const Model& model, const WeightSlots& w,
                 std::span<const Token> tokens, std::span<const std::size_t> pos_rows,
                 ForwardHooks& hooks) {
  const ModelConfig& c = model.config();
  check_tokens(c, tokens);
  const std::size_t n_pos = tokens.size();

  std::vector<std::size_t> tok_rows(tokens.begin(), tokens.end());
  hooks.on_output(tape, NodeId::tok(), tape.gather_rows(w["embed.W_E"], tok_rows));
  if (c.has_pos()) {
    std::vector<std::size_t> rows;
    if (pos_rows.empty()) {
      for (std::size_t i = 0; i < n_pos; ++i) rows.push_back(i);
    } else {
      require(pos_rows.size() == n_pos, ErrorKind::kPairing,
              "positional override length differs from sequence length");
      rows.assign(pos_rows.begin(), pos_rows.end());
    }
    hooks.on_output(tape, NodeId::pos(), tape.gather_rows(w["pos_embed.W_pos"], rows));
  }

  constexpr InputSlot kQkv[3] = {InputSlot::kQ, InputSlot::kK, InputSlot::kV};
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    std::vector<std::array<Slot, 3>> qkv(c.n_heads);
    for (std::uint32_t h = 0; h < c.n_heads; ++h) {
      const NodeId head = NodeId::attn(l, h);
      for (int s = 0; s < 3; ++s) {
        const char* m = s == 0 ? "Q" : (s == 1 ? "K" : "V");
        Slot x = maybe_norm(tape, c, w, p + "ln1", hooks.assemble(tape, head, kQkv[s]));
        Slot proj = tape.add_bias(tape.matmul(x, tape.select(w[p + "attn.W_" + m], h)),
                                  tape.select(w[p + "attn.b_" + m], h));
        qkv[h][s] = hooks.on_qkv(tape, head, kQkv[s], proj);
      }
    }
    std::vector<std::pair<NodeId, Slot>> outputs;
    for (std::uint32_t h = 0; h < c.n_heads; ++h) {
      Slot scores = tape.scale(tape.matmul(qkv[h][0], tape.transpose(qkv[h][1])), c.attn_scale);
      Slot pattern = tape.causal_softmax(scores);
      Slot z = tape.matmul(pattern, qkv[h][2]);
      Slot out = tape.add_bias(tape.matmul(z, tape.select(w[p + "attn.W_O"], h)),
                               tape.select(w[p + "attn.b_O"], h));
      outputs.emplace_back(NodeId::attn(l, h), out);
    }
    for (auto& [node, out] : outputs) hooks.on_output(tape, node, out);

    if (c.has_mlp()) {
      const NodeId mlp = NodeId::mlp(l);
      Slot x = maybe_norm(tape, c, w, p + "ln2", hooks.assemble(tape, mlp, InputSlot::kIn));
      Slot hidden = tape.activation(tape.add_bias(tape.matmul(x, w[p + "mlp.W_in"]), w[p + "mlp.b_in"]),
                                    c.activation);
      Slot out = tape.add_bias(tape.matmul(hidden, w[p + "mlp.W_out"]), w[p + "mlp.b_out"]);
      hooks.on_output(tape, mlp, out);
    }
  }

  Slot x = maybe_norm(tape, c, w, "ln_final", hooks.assemble(tape, NodeId::out(), InputSlot::kIn));
  return tape.add_bias(tape.matmul(x, w["unembed.W_U"]), w["unembed.b_U"]);
}

namespace {

class CachingHooks : public ResidualHooks {
 public:
  CachingHooks(const Tape& tape, const ModelConfig& c, ExampleActivations& acts)
      : tape_(tape), config_(c), acts_(acts) {
    acts_.contributions.assign(forward_nodes(c).size(), Tensor(num::Shape{0}, {}));
    acts_.qkv.assign(static_cast<std::size_t>(c.n_layers) * c.n_heads * 3, Tensor(num::Shape{0}, {}));
  }

  Slot assemble(Tape& tape, const NodeId& dst, InputSlot slot) override {
    Slot r = ResidualHooks::assemble(tape, dst, slot);
    const bool first_head_q = dst.kind == NodeKind::kHead && dst.head == 0 && slot == InputSlot::kQ;
    if (first_head_q || dst.kind == NodeKind::kOutput) acts_.resid.push_back(tape_.value(r));
    if (dst.kind == NodeKind::kMlp) acts_.mlp_inputs.push_back(tape_.value(r));
    return r;
  }

  Slot on_output(Tape& tape, const NodeId& node, Slot contribution) override {
    acts_.contributions[node_index(config_, node)] = tape_.value(contribution);
    return ResidualHooks::on_output(tape, node, contribution);
  }

  Slot on_qkv(Tape&, const NodeId& head, InputSlot which, Slot value) override {
    acts_.qkv[qkv_index(config_, head.layer, head.head, which)] = tape_.value(value);
    return value;
  }

 private:
  const Tape& tape_;
  const ModelConfig& config_;
  ExampleActivations& acts_;
};

}  // namespace

ExampleActivations forward_example(const Model& model, std::span<const Token> tokens,
                                   std::span<const std::size_t> pos_rows) {
  Tape tape(false);
  WeightSlots w = bind_weights(tape, model, false);
  ExampleActivations acts;
  CachingHooks hooks(tape, model.config(), acts);
  Slot logits = run_forward(tape, model, w, tokens, pos_rows, hooks);
  acts.logits = tape.value(logits);
  num::check_finite(acts.logits, "logits");
  return acts;
}

ForwardResult forward(const Model& model, const std::vector<TokenSeq>& batch) {
  require(!batch.empty(), ErrorKind::kUsage, "empty batch");
  const std::size_t n = batch.front().size();
  for (const auto& seq : batch) {
    require(seq.size() == n, ErrorKind::kDimension, "batch sequences must share one length");
  }
  ForwardResult result;
  result.cache.config = model.config();
  const std::size_t v = model.config().vocab;
  result.logits = Tensor({batch.size(), n, v});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    result.cache.examples.push_back(forward_example(model, batch[b]));
    result.logits.set_slice(b, result.cache.examples.back().logits);
  }
  return result;
}

const Tensor& node_contribution(const ActivationCache& cache, std::size_t example,
                                const NodeId& src) {
  require(example < cache.examples.size(), ErrorKind::kIdentifier, "example index out of range");
  require(src.kind != NodeKind::kOutput, ErrorKind::kIdentifier,
          "the output node writes no residual contribution");
  return cache.examples[example].contributions[node_index(cache.config, src)];
}

}  // namespace autocirc
