#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "buckle/geometry.hpp"

namespace buckle {

/// Node attributes: centroid (x, y), area in cells, and the eccentricity of
/// the ellipse with the same second moments.
struct NodeFeature {
  double x = 0.0;
  double y = 0.0;
  double area = 0.0;
  double eccentricity = 0.0;
  bool operator==(const NodeFeature&) const = default;
};

enum class GraphMethod { Ball, Rag, Exact };
enum class Density { Sparse, Medium, Dense };

std::string to_string(GraphMethod method);
std::string to_string(Density density);
GraphMethod parse_method(const std::string& text);
Density parse_density(const std::string& text);

/// Requested superpixels per density level: 150 / 300 / 600.
int density_target(Density density);

/// Undirected spatial graph. `edges` holds each unordered pair once as
/// (i, j) with i <= j, sorted, and always contains every self-loop (i, i).
/// The feature of the directed edge j -> i is x_j - x_i.
struct SpatialGraph {
  std::vector<NodeFeature> nodes;
  std::vector<std::pair<int, int>> edges;
  std::string id;
  Label label = -1;
  GraphMethod method = GraphMethod::Ball;
  Density density = Density::Medium;
  double radius = 0.0;
  bool normalized = false;

  int node_count() const { return static_cast<int>(nodes.size()); }
  bool has_edge(int i, int j) const;
  Eigen::Vector2d edge_feature(int i, int j) const;
  /// Neighbor lists (including the node itself), ascending.
  std::vector<std::vector<int>> adjacency() const;
  bool operator==(const SpatialGraph&) const = default;
};

struct SegmentationMap {
  int rows = 0;
  int cols = 0;
  std::vector<int> labels;  // row-major, one label per cell, 0..count-1
  int count = 0;
  int target_count = 0;
  double compactness = 10.0;
  int iterations = 10;

  int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * cols + c]; }
};

/// SLIC on the (row, col, occupancy) space. The seed grid is sized so that
/// about `target_count` superpixels cover the occupied cells; assignments use
/// D^2 = dI^2 + (ds / S)^2 m^2 inside a 2S x 2S window. A final pass splits
/// disconnected labels and merges fragments smaller than half a nominal
/// superpixel into the neighbor sharing the longest boundary.
SegmentationMap slic_segment(const Bitmap& bitmap, int target_count, double compactness = 10.0,
                             int iterations = 10);

struct SuperpixelNodes {
  std::vector<NodeFeature> features;
  std::vector<int> node_of_segment;  // -1 for discarded superpixels
};

/// Keeps superpixels whose occupied fraction is at least 0.5. Positions are
/// physical (cell side = width / cols); area counts occupied cells.
SuperpixelNodes superpixel_features(const SegmentationMap& seg, const Bitmap& bitmap,
                                    double width = 1.0);

/// Eccentricity of a set of unit cells from their second central moments
/// (each cell contributes its own 1/12 variance).
double cell_eccentricity(const std::vector<std::pair<int, int>>& cells);

SpatialGraph build_rag(const SegmentationMap& seg, const SuperpixelNodes& nodes);

/// Edge iff |x_j - x_i| <= radius. Uses a uniform bucket grid of side radius.
SpatialGraph build_ball_query(const std::vector<NodeFeature>& features, double radius);

/// Sub1: one node per occupied cell, 4-neighbor edges. Sub2: one node per
/// ring, edges between rings whose centers are closer than 2 * outer.
/// Sub3 throws UnsupportedRepresentationError.
SpatialGraph build_exact(const ColumnSpec& spec, const Bitmap& bitmap);

struct NormalizationStats {
  double width = 1.0;
  double area_min = 0.0;
  double area_max = 0.0;
  double ecc_min = 0.0;
  double ecc_max = 0.0;
  bool operator==(const NormalizationStats&) const = default;
};

NormalizationStats compute_stats(const std::vector<SpatialGraph>& graphs, double width = 1.0);

struct NormalizedDataset {
  std::vector<SpatialGraph> graphs;
  NormalizationStats stats;
  std::vector<std::string> warnings;
};

/// Positions are divided by the width; area and eccentricity are min-max
/// scaled with `stats` (computed from `graphs` when absent). Values outside
/// the reference range are not clamped; a degenerate range maps to 0 and
/// records a warning.
NormalizedDataset normalize_features(std::vector<SpatialGraph> graphs,
                                     const std::optional<NormalizationStats>& stats = std::nullopt);

}  // namespace buckle
