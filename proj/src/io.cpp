#include "autocirc/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "autocirc/error.hpp"

namespace autocirc {

namespace {

template <typename T>
T field(const Json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, where + ": missing or malformed field '" + key + "'");
  }
}

}  // namespace

Json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"d_head", c.d_head},
          {"d_mlp", c.d_mlp},
          {"vocab", c.vocab},
          {"n_ctx", c.n_ctx},
          {"activation", to_string(c.activation)},
          {"norm", to_string(c.norm)},
          {"pos_embed", to_string(c.pos_embed)},
          {"attn_scale", c.attn_scale},
          {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const Json& j) {
  const std::string w = "model config";
  ModelConfig c;
  c.n_layers = field<std::uint32_t>(j, "n_layers", w);
  c.n_heads = field<std::uint32_t>(j, "n_heads", w);
  c.d_model = field<std::uint32_t>(j, "d_model", w);
  c.d_head = field<std::uint32_t>(j, "d_head", w);
  c.d_mlp = field<std::uint32_t>(j, "d_mlp", w);
  c.vocab = field<std::uint32_t>(j, "vocab", w);
  c.n_ctx = field<std::uint32_t>(j, "n_ctx", w);
  try {
    c.activation = parse_activation(field<std::string>(j, "activation", w));
    c.norm = parse_norm(field<std::string>(j, "norm", w));
    c.pos_embed = parse_pos_embed(field<std::string>(j, "pos_embed", w));
  } catch (const Error& e) {
    fail(ErrorKind::kFormat, std::string("model config: ") + e.what());
  }
  c.attn_scale = j.contains("attn_scale") ? field<double>(j, "attn_scale", w) : default_attn_scale(c.d_head);
  if (j.contains("ln_eps")) c.ln_eps = field<double>(j, "ln_eps", w);
  c.validate();
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kFormat, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kUsage, "cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  require(out.good(), ErrorKind::kUsage, "write failed for " + path.string());
}

std::string file_digest(const std::filesystem::path& path) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(read_file(path))));
  return buf;
}

Json load_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, path.string() + ": not valid JSON");
  }
}

void save_json(const std::filesystem::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

Json circuit_to_json(const Subgraph& h) {
  Json edges = Json::array();
  for (std::size_t e : h.edge_indices()) edges.push_back(to_string(h.graph().edge(e)));
  return {{"graph_fingerprint", h.graph().fingerprint()},
          {"granularity", to_string(h.graph().granularity())},
          {"edges", edges}};
}

Json circuit_to_json(const CompGraph& graph, const CanonicalCircuit& c) {
  Json j = circuit_to_json(c.to_subgraph(graph));
  j["provenance"] = c.provenance;
  return j;
}

Subgraph circuit_from_json(const Json& j, const CompGraph& graph) {
  const std::string fp = field<std::string>(j, "graph_fingerprint", "circuit");
  require(fp == graph.fingerprint(), ErrorKind::kFormat,
          "circuit fingerprint " + fp + " does not match graph " + graph.fingerprint());
  Subgraph h = Subgraph::empty(graph);
  for (const std::string& s : field<std::vector<std::string>>(j, "edges", "circuit")) {
    auto idx = graph.find_edge(s);
    require(idx.has_value(), ErrorKind::kFormat, "unknown edge '" + s + "'");
    h.set(*idx, true);
  }
  return h;
}

void save_circuit(const std::filesystem::path& path, const Subgraph& h) { save_json(path, circuit_to_json(h)); }

Subgraph load_circuit(const std::filesystem::path& path, const CompGraph& graph) {
  return circuit_from_json(load_json(path), graph);
}

Json dataset_to_json(const TaskDataset& d) {
  Json examples = Json::array();
  for (const TaskExample& ex : d.examples) {
    Json e = {{"clean", ex.clean}, {"corrupted", ex.corrupted}, {"positions", ex.targets.positions}};
    if (!ex.targets.correct.empty()) e["correct"] = ex.targets.correct;
    if (!ex.targets.incorrect.empty()) e["incorrect"] = ex.targets.incorrect;
    if (!ex.targets.target.empty()) e["targets"] = ex.targets.target;
    if (!ex.corrupted_pos.empty()) e["corrupted_pos"] = ex.corrupted_pos;
    examples.push_back(std::move(e));
  }
  return {{"task", d.task}, {"metric", {{"kind", to_string(d.metric)}}}, {"examples", examples}};
}

TaskDataset dataset_from_json(const Json& j) {
  TaskDataset d;
  d.task = j.value("task", "");
  try {
    d.metric = parse_metric(field<std::string>(j.at("metric"), "kind", "dataset metric"));
  } catch (const Error& e) {
    fail(ErrorKind::kFormat, std::string("dataset: ") + e.what());
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "dataset: missing metric");
  }
  require(j.contains("examples") && j["examples"].is_array(), ErrorKind::kFormat, "dataset: missing examples");
  std::size_t i = 0;
  for (const Json& e : j["examples"]) {
    const std::string w = "dataset example " + std::to_string(i++);
    TaskExample ex;
    ex.clean = field<TokenSeq>(e, "clean", w);
    ex.corrupted = field<TokenSeq>(e, "corrupted", w);
    ex.targets.positions = field<std::vector<std::size_t>>(e, "positions", w);
    if (e.contains("correct")) ex.targets.correct = field<std::vector<std::vector<Token>>>(e, "correct", w);
    if (e.contains("incorrect")) ex.targets.incorrect = field<std::vector<std::vector<Token>>>(e, "incorrect", w);
    if (e.contains("targets")) ex.targets.target = field<std::vector<std::vector<double>>>(e, "targets", w);
    if (e.contains("corrupted_pos")) ex.corrupted_pos = field<std::vector<std::size_t>>(e, "corrupted_pos", w);
    d.examples.push_back(std::move(ex));
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const TaskDataset& d) { save_json(path, dataset_to_json(d)); }

TaskDataset load_dataset(const std::filesystem::path& path) { return dataset_from_json(load_json(path)); }

Json acdc_log_to_json(const CompGraph& graph, const DiscoveryResult& r, const AcdcConfig& c) {
  Json steps = Json::array();
  for (const AcdcStep& s : r.log) {
    steps.push_back({{"edge", to_string(graph.edge(s.edge))},
                     {"f_before", s.f_before},
                     {"f_after", s.f_after},
                     {"decision", s.removed ? "remove" : "keep"}});
  }
  return {{"method", "acdc"},
          {"tau", c.tau},
          {"ablation", to_string(c.ablation)},
          {"parent_policy", to_string(c.policy)},
          {"removal", to_string(c.removal)},
          {"prune_disconnected", c.prunes()},
          {"full_metric", r.full_metric},
          {"final_metric", r.final_metric},
          {"evaluations", r.evaluations},
          {"pruned_edges", r.pruned_edges},
          {"edges", r.subgraph.edge_count()},
          {"steps", steps}};
}

Json sp_log_to_json(const SpResult& r, const SpConfig& c, const MaskSelection& sel) {
  Json units = Json::array();
  for (std::size_t j = 0; j < r.mask.units.size(); ++j) {
    units.push_back({{"unit", to_string(r.mask.units[j])},
                     {"log_alpha", r.mask.log_alpha[j]},
                     {"expectation", r.mask.expectation(j)},
                     {"open", static_cast<bool>(sel.open[j])}});
  }
  Json loss = Json::array();
  for (const SpStepLog& s : r.history) loss.push_back({s.loss, s.metric, s.penalty});
  Json nodes = Json::array();
  for (const NodeId& n : sel.nodes) nodes.push_back(to_string(n));
  return {{"method", "sp"},        {"lambda", c.lambda},        {"steps", c.steps},
          {"learning_rate", c.learning_rate}, {"seed", c.seed}, {"init_mean", c.init_mean},
          {"init_std", c.init_std}, {"ablation", to_string(c.ablation)}, {"units", units},
          {"nodes", nodes},         {"edges", sel.subgraph.edge_count()}, {"loss_history", loss}};
}

Json hisp_log_to_json(const ImportanceTable& raw, const ImportanceTable& normalized,
                      const std::vector<std::size_t>& ks) {
  Json units = Json::array();
  for (std::size_t j = 0; j < raw.units.size(); ++j) {
    units.push_back({{"unit", to_string(raw.units[j])},
                     {"layer", raw.layer[j]},
                     {"score", raw.scores[j]},
                     {"normalized", normalized.scores[j]}});
  }
  return {{"method", "hisp"}, {"k", ks}, {"nonzero_units", nonzero_units(raw)}, {"units", units}};
}

std::string export_dot(const CompGraph& graph, const Subgraph& h,
                       const std::optional<std::vector<double>>& edge_scores) {
  require(&h.graph() == &graph, ErrorKind::kUsage, "subgraph belongs to a different graph");
  double max_score = 0.0;
  if (edge_scores) {
    require(edge_scores->size() == graph.edge_count(), ErrorKind::kDimension, "one score per edge required");
    for (std::size_t e : h.edge_indices()) max_score = std::max(max_score, std::abs((*edge_scores)[e]));
  }
  std::ostringstream os;
  os << "digraph circuit {\n  rankdir=BT;\n  node [shape=box];\n";
  for (const NodeId& n : graph.nodes()) os << "  \"" << to_string(n) << "\";\n";
  for (std::size_t e : h.edge_indices()) {
    const Edge& edge = graph.edge(e);
    double width = 1.0;
    if (edge_scores && max_score > 0.0) width = 0.5 + 4.5 * std::abs((*edge_scores)[e]) / max_score;
    os << "  \"" << to_string(edge.src) << "\" -> \"" << to_string(edge.dst) << "\" [label=\""
       << to_string(edge.slot) << "\", style=solid, penwidth=" << csv_number(width) << "];\n";
  }
  os << "}\n";
  return os.str();
}

std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace autocirc
