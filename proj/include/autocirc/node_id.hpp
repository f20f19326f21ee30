#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace autocirc {

enum class NodeKind : std::uint8_t { kTokEmbed, kPosEmbed, kHead, kMlp, kOutput };

/// A component of the model's computational graph. Canonical renderings are
/// "tok", "pos", "a{layer}.h{head}", "m{layer}" and "out".
struct NodeId {
  NodeKind kind = NodeKind::kTokEmbed;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  static NodeId tok() { return {NodeKind::kTokEmbed, 0, 0}; }
  static NodeId pos() { return {NodeKind::kPosEmbed, 0, 0}; }
  static NodeId attn(std::uint32_t layer, std::uint32_t head) { return {NodeKind::kHead, layer, head}; }
  static NodeId mlp(std::uint32_t layer) { return {NodeKind::kMlp, layer, 0}; }
  static NodeId out() { return {NodeKind::kOutput, 0, 0}; }

  bool is_embed() const { return kind == NodeKind::kTokEmbed || kind == NodeKind::kPosEmbed; }
  bool is_component() const { return kind == NodeKind::kHead || kind == NodeKind::kMlp; }

  friend bool operator==(const NodeId&, const NodeId&) = default;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// Input slot of a destination node.
enum class InputSlot : std::uint8_t { kQ, kK, kV, kIn };

std::string to_string(const NodeId& id);
std::optional<NodeId> parse_node(std::string_view text);

std::string_view to_string(InputSlot slot);
std::optional<InputSlot> parse_slot(std::string_view text);

}  // namespace autocirc
