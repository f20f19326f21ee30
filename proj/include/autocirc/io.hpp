#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "autocirc/acdc.hpp"
#include "autocirc/dataset.hpp"
#include "autocirc/eval.hpp"
#include "autocirc/graph.hpp"
#include "autocirc/maskers.hpp"
#include "autocirc/model.hpp"

namespace autocirc {

using Json = nlohmann::ordered_json;

Json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const Json& j);

std::string read_file(const std::filesystem::path& path);
/// Writes atomically enough for our purposes: truncate and write in one go.
void write_file(const std::filesystem::path& path, const std::string& data);

/// 16 hex digits of FNV-1a over the file's bytes.
std::string file_digest(const std::filesystem::path& path);

Json circuit_to_json(const Subgraph& h);
Json circuit_to_json(const CompGraph& graph, const CanonicalCircuit& c);
/// Validates the fingerprint and every edge against `graph`.
Subgraph circuit_from_json(const Json& j, const CompGraph& graph);
void save_circuit(const std::filesystem::path& path, const Subgraph& h);
Subgraph load_circuit(const std::filesystem::path& path, const CompGraph& graph);

Json dataset_to_json(const TaskDataset& d);
TaskDataset dataset_from_json(const Json& j);
void save_dataset(const std::filesystem::path& path, const TaskDataset& d);
TaskDataset load_dataset(const std::filesystem::path& path);

Json acdc_log_to_json(const CompGraph& graph, const DiscoveryResult& r, const AcdcConfig& c);
Json sp_log_to_json(const SpResult& r, const SpConfig& c, const MaskSelection& sel);
Json hisp_log_to_json(const ImportanceTable& raw, const ImportanceTable& normalized,
                      const std::vector<std::size_t>& ks);

/// Deterministic DOT. Included edges are drawn with penwidth proportional to
/// their normalised score (1 when no scores are given).
std::string export_dot(const CompGraph& graph, const Subgraph& h,
                       const std::optional<std::vector<double>>& edge_scores = std::nullopt);

/// Fixed-notation number for CSV output.
std::string csv_number(double v);

Json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const Json& j);

}  // namespace autocirc
