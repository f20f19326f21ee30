#include "autocirc/node_id.hpp"

#include <charconv>

#include "autocirc/error.hpp"

namespace autocirc {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kUnknownSlot: return "unknown-slot";
    case ErrorKind::kVocab: return "vocab";
    case ErrorKind::kContext: return "context";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIdentifier: return "identifier";
    case ErrorKind::kPairing: return "pairing";
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kSpec: return "spec";
    case ErrorKind::kCoverage: return "coverage";
    case ErrorKind::kTraining: return "training";
  }
  return "unknown";
}

std::string to_string(const NodeId& id) {
  switch (id.kind) {
    case NodeKind::kTokEmbed: return "tok";
    case NodeKind::kPosEmbed: return "pos";
    case NodeKind::kHead: return "a" + std::to_string(id.layer) + ".h" + std::to_string(id.head);
    case NodeKind::kMlp: return "m" + std::to_string(id.layer);
    case NodeKind::kOutput: return "out";
  }
  return "?";
}

namespace {

bool parse_uint(std::string_view text, std::uint32_t& out) {
  if (text.empty() || (text.size() > 1 && text[0] == '0')) return false;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

std::optional<NodeId> parse_node(std::string_view text) {
  if (text == "tok") return NodeId::tok();
  if (text == "pos") return NodeId::pos();
  if (text == "out") return NodeId::out();
  if (text.size() >= 2 && text[0] == 'm') {
    std::uint32_t layer = 0;
    if (parse_uint(text.substr(1), layer)) return NodeId::mlp(layer);
    return std::nullopt;
  }
  if (text.size() >= 5 && text[0] == 'a') {
    const auto dot = text.find(".h");
    if (dot == std::string_view::npos) return std::nullopt;
    std::uint32_t layer = 0, head = 0;
    if (parse_uint(text.substr(1, dot - 1), layer) && parse_uint(text.substr(dot + 2), head)) {
      return NodeId::attn(layer, head);
    }
  }
  return std::nullopt;
}

std::string_view to_string(InputSlot slot) {
  switch (slot) {
    case InputSlot::kQ: return "q";
    case InputSlot::kK: return "k";
    case InputSlot::kV: return "v";
    case InputSlot::kIn: return "in";
  }
  return "?";
}

std::optional<InputSlot> parse_slot(std::string_view text) {
  if (text == "q") return InputSlot::kQ;
  if (text == "k") return InputSlot::kK;
  if (text == "v") return InputSlot::kV;
  if (text == "in") return InputSlot::kIn;
  return std::nullopt;
}

}  // namespace autocirc
