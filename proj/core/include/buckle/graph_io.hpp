#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "buckle/graph.hpp"

namespace buckle {

/// One JSON object per graph:
///   {"id", "label", "method", "density", "r", "normalized",
///    "nodes": [[x, y, area, ecc], ...], "edges": [[i, j], ...]}
/// Edges are written with i < j; self-loops are implicit and restored on read.
std::string graph_to_json(const SpatialGraph& graph);
SpatialGraph graph_from_json(const std::string& text);

void write_graphs_jsonl(std::ostream& out, const std::vector<SpatialGraph>& graphs);
std::vector<SpatialGraph> read_graphs_jsonl(std::istream& in);

/// Binary variant of the same records: magic "BKLGRPH1", u32 version, u64
/// graph count, then per graph the id, label, method, density, radius,
/// normalized flag, nodes (4 doubles each) and non-loop edges (u32 pairs),
/// all little-endian.
void write_graphs_binary(std::ostream& out, const std::vector<SpatialGraph>& graphs);
std::vector<SpatialGraph> read_graphs_binary(std::istream& in);

std::string stats_to_json(const NormalizationStats& stats);
NormalizationStats stats_from_json(const std::string& text);

}  // namespace buckle
