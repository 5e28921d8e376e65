#include "buckle/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>

#include "buckle/error.hpp"

namespace buckle {

std::string to_string(GraphMethod method) {
  switch (method) {
    case GraphMethod::Ball: return "ball";
    case GraphMethod::Rag: return "rag";
    case GraphMethod::Exact: return "exact";
  }
  return "ball";
}

std::string to_string(Density density) {
  switch (density) {
    case Density::Sparse: return "sparse";
    case Density::Medium: return "medium";
    case Density::Dense: return "dense";
  }
  return "medium";
}

GraphMethod parse_method(const std::string& text) {
  if (text == "ball") return GraphMethod::Ball;
  if (text == "rag") return GraphMethod::Rag;
  if (text == "exact") return GraphMethod::Exact;
  throw ArgumentError("unknown graph method '" + text + "' (expected ball, rag or exact)");
}

Density parse_density(const std::string& text) {
  if (text == "sparse") return Density::Sparse;
  if (text == "medium") return Density::Medium;
  if (text == "dense") return Density::Dense;
  throw ArgumentError("unknown density '" + text + "' (expected sparse, medium or dense)");
}

int density_target(Density density) {
  switch (density) {
    case Density::Sparse: return 150;
    case Density::Medium: return 300;
    case Density::Dense: return 600;
  }
  return 300;
}

bool SpatialGraph::has_edge(int i, int j) const {
  const auto key = std::minmax(i, j);
  return std::binary_search(edges.begin(), edges.end(), std::pair<int, int>{key.first, key.second});
}

Eigen::Vector2d SpatialGraph::edge_feature(int i, int j) const {
  return {nodes[j].x - nodes[i].x, nodes[j].y - nodes[i].y};
}

std::vector<std::vector<int>> SpatialGraph::adjacency() const {
  std::vector<std::vector<int>> adj(nodes.size());
  for (const auto& [i, j] : edges) {
    adj[i].push_back(j);
    if (i != j) adj[j].push_back(i);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

namespace {

void finish_edges(SpatialGraph& g) {
  for (int i = 0; i < g.node_count(); ++i) g.edges.emplace_back(i, i);
  for (auto& e : g.edges) {
    if (e.first > e.second) std::swap(e.first, e.second);
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
}

// Grid layout for the SLIC seeds; mirrors the usual "regular grid" rule that
// gives a dimension a single step when it is shorter than the nominal step.
std::pair<int, int> seed_steps(int rows, int cols, int n_points) {
  const double space = static_cast<double>(rows) * cols;
  if (space <= n_points) return {1, 1};
  const int small = std::min(rows, cols);
  const int large = std::max(rows, cols);
  double step_small = std::sqrt(space / n_points);
  double step_large = step_small;
  if (small < step_small) {
    step_small = small;
    step_large = static_cast<double>(large) / n_points;
  }
  const int s_small = std::max(1, static_cast<int>(std::lround(step_small)));
  const int s_large = std::max(1, static_cast<int>(std::lround(step_large)));
  return rows <= cols ? std::pair{s_small, s_large} : std::pair{s_large, s_small};
}

// Splits every label into 4-connected pieces, then merges pieces below
// min_size into the neighbor with the longest shared boundary.
std::vector<int> enforce_connectivity(const std::vector<int>& labels, int rows, int cols,
                                      int min_size, int& count) {
  const int n = rows * cols;
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  std::vector<int> size;
  for (int start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const int id = static_cast<int>(size.size());
    size.push_back(0);
    std::deque<int> q{start};
    comp[start] = id;
    while (!q.empty()) {
      const int p = q.front();
      q.pop_front();
      ++size[id];
      const int r = p / cols, c = p % cols;
      const int nb[4] = {r > 0 ? p - cols : -1, r + 1 < rows ? p + cols : -1, c > 0 ? p - 1 : -1,
                         c + 1 < cols ? p + 1 : -1};
      for (int q2 : nb) {
        if (q2 < 0 || comp[q2] >= 0 || labels[q2] != labels[p]) continue;
        comp[q2] = id;
        q.push_back(q2);
      }
    }
  }

  // Union-find over components for merges.
  const int nc = static_cast<int>(size.size());
  std::vector<int> parent(static_cast<std::size_t>(nc));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };

  bool merged = true;
  while (merged) {
    merged = false;
    // Boundary lengths between current groups.
    std::map<std::pair<int, int>, int> shared;
    for (int p = 0; p < n; ++p) {
      const int r = p / cols, c = p % cols;
      const int a = find(comp[p]);
      if (c + 1 < cols) {
        const int b = find(comp[p + 1]);
        if (a != b) ++shared[std::minmax(a, b)];
      }
      if (r + 1 < rows) {
        const int b = find(comp[p + cols]);
        if (a != b) ++shared[std::minmax(a, b)];
      }
    }
    std::vector<int> gsize(static_cast<std::size_t>(nc), 0);
    for (int k = 0; k < nc; ++k) gsize[find(k)] += size[k];
    std::vector<int> best(static_cast<std::size_t>(nc), -1), best_len(static_cast<std::size_t>(nc), 0);
    for (const auto& [key, len] : shared) {
      const auto [a, b] = key;
      if (len > best_len[a] || (len == best_len[a] && b < best[a])) best_len[a] = len, best[a] = b;
      if (len > best_len[b] || (len == best_len[b] && a < best[b])) best_len[b] = len, best[b] = a;
    }
    // Boundaries are stale once a group changes, so each group takes part in
    // at most one merge per round.
    std::vector<char> touched(static_cast<std::size_t>(nc), 0);
    for (int k = 0; k < nc; ++k) {
      if (find(k) != k || gsize[k] >= min_size || best[k] < 0) continue;
      const int target = best[k];
      if (touched[k] || touched[target]) continue;
      parent[k] = target;
      touched[k] = touched[target] = 1;
      merged = true;
    }
  }

  std::vector<int> out(static_cast<std::size_t>(n));
  std::unordered_map<int, int> relabel;
  count = 0;
  for (int p = 0; p < n; ++p) {
    const int root = find(comp[p]);
    auto it = relabel.find(root);
    if (it == relabel.end()) it = relabel.emplace(root, count++).first;
    out[p] = it->second;
  }
  return out;
}

}  // namespace

SegmentationMap slic_segment(const Bitmap& bitmap, int target_count, double compactness,
                             int iterations) {
  if (target_count < 2) throw ArgumentError("SLIC target count must be >= 2");
  if (iterations < 1) throw ArgumentError("SLIC needs at least one iteration");
  const int rows = bitmap.rows;
  const int cols = bitmap.cols;
  const int n = rows * cols;
  if (target_count > n) throw ArgumentError("SLIC target count exceeds cell count");
  const std::size_t occupied = bitmap.occupied_count();
  if (occupied == 0) throw EmptyStructureError("bitmap has no occupied cells");

  // Scale the grid so the occupied cells receive about target_count seeds.
  const int n_points = static_cast<int>(std::min<double>(
      n, std::lround(static_cast<double>(target_count) * n / static_cast<double>(occupied))));
  const auto [step_r, step_c] = seed_steps(rows, cols, n_points);
  const double S = std::max(step_r, step_c);
  const double spatial = (compactness / S) * (compactness / S);

  struct Center {
    double r, c, v;
  };
  std::vector<Center> centers;
  for (int r = step_r / 2; r < rows; r += step_r) {
    for (int c = step_c / 2; c < cols; c += step_c) {
      centers.push_back({static_cast<double>(r), static_cast<double>(c), bitmap.at(r, c) ? 1.0 : 0.0});
    }
  }
  const int k_count = static_cast<int>(centers.size());
  const int seeds_per_row = (cols - step_c / 2 + step_c - 1) / step_c;

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int r = 0; r < rows; ++r) {
    const int gr = std::min((r) / step_r, (k_count / seeds_per_row) - 1);
    for (int c = 0; c < cols; ++c) {
      const int gc = std::min(c / step_c, seeds_per_row - 1);
      labels[static_cast<std::size_t>(r) * cols + c] = gr * seeds_per_row + gc;
    }
  }

  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int it = 0; it < iterations; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (int k = 0; k < k_count; ++k) {
      const Center& ck = centers[k];
      const int r0 = std::max(0, static_cast<int>(std::floor(ck.r - step_r)));
      const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(ck.r + step_r)));
      const int c0 = std::max(0, static_cast<int>(std::floor(ck.c - step_c)));
      const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(ck.c + step_c)));
      for (int r = r0; r <= r1; ++r) {
        const double dr = r - ck.r;
        for (int c = c0; c <= c1; ++c) {
          const double dc = c - ck.c;
          const double dv = (bitmap.at(r, c) ? 1.0 : 0.0) - ck.v;
          const double d = dv * dv + (dr * dr + dc * dc) * spatial;
          const std::size_t p = static_cast<std::size_t>(r) * cols + c;
          if (d < dist[p]) {
            dist[p] = d;
            labels[p] = k;
          }
        }
      }
    }
    std::vector<double> sr(k_count, 0.0), sc(k_count, 0.0), sv(k_count, 0.0);
    std::vector<int> cnt(k_count, 0);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int k = labels[static_cast<std::size_t>(r) * cols + c];
        sr[k] += r;
        sc[k] += c;
        sv[k] += bitmap.at(r, c) ? 1.0 : 0.0;
        ++cnt[k];
      }
    }
    for (int k = 0; k < k_count; ++k) {
      if (cnt[k] == 0) continue;
      centers[k] = {sr[k] / cnt[k], sc[k] / cnt[k], sv[k] / cnt[k]};
    }
  }

  SegmentationMap seg;
  seg.rows = rows;
  seg.cols = cols;
  seg.target_count = target_count;
  seg.compactness = compactness;
  seg.iterations = iterations;
  const int min_size = std::max(1, static_cast<int>(0.5 * n / std::max(1, k_count)));
  seg.labels = enforce_connectivity(labels, rows, cols, min_size, seg.count);
  return seg;
}

double cell_eccentricity(const std::vector<std::pair<int, int>>& cells) {
  if (cells.empty()) return 0.0;
  double mr = 0.0, mc = 0.0;
  for (const auto& [r, c] : cells) {
    mr += r;
    mc += c;
  }
  const double n = static_cast<double>(cells.size());
  mr /= n;
  mc /= n;
  double srr = 0.0, scc = 0.0, src = 0.0;
  for (const auto& [r, c] : cells) {
    srr += (r - mr) * (r - mr);
    scc += (c - mc) * (c - mc);
    src += (r - mr) * (c - mc);
  }
  const double a = srr / n + 1.0 / 12.0;
  const double b = scc / n + 1.0 / 12.0;
  const double d = src / n;
  const double mean = 0.5 * (a + b);
  const double half = std::sqrt(0.25 * (a - b) * (a - b) + d * d);
  const double l1 = mean + half;
  const double l2 = mean - half;
  return std::sqrt(std::max(0.0, 1.0 - l2 / l1));
}

SuperpixelNodes superpixel_features(const SegmentationMap& seg, const Bitmap& bitmap, double width) {
  if (seg.rows != bitmap.rows || seg.cols != bitmap.cols ||
      seg.labels.size() != bitmap.cells.size()) {
    throw ArgumentError("segmentation does not match bitmap");
  }
  std::vector<int> total(static_cast<std::size_t>(seg.count), 0);
  std::vector<std::vector<std::pair<int, int>>> occ(static_cast<std::size_t>(seg.count));
  for (int r = 0; r < seg.rows; ++r) {
    for (int c = 0; c < seg.cols; ++c) {
      const int k = seg.at(r, c);
      ++total[k];
      if (bitmap.at(r, c)) occ[k].emplace_back(r, c);
    }
  }
  const double cell = width / seg.cols;
  const double length = cell * seg.rows;
  SuperpixelNodes out;
  out.node_of_segment.assign(static_cast<std::size_t>(seg.count), -1);
  for (int k = 0; k < seg.count; ++k) {
    if (occ[k].empty() || 2 * occ[k].size() < static_cast<std::size_t>(total[k])) continue;
    double mr = 0.0, mc = 0.0;
    for (const auto& [r, c] : occ[k]) {
      mr += r;
      mc += c;
    }
    mr /= occ[k].size();
    mc /= occ[k].size();
    NodeFeature f;
    f.x = (mc + 0.5) * cell;
    f.y = length - (mr + 0.5) * cell;
    f.area = static_cast<double>(occ[k].size());
    f.eccentricity = cell_eccentricity(occ[k]);
    out.node_of_segment[k] = static_cast<int>(out.features.size());
    out.features.push_back(f);
  }
  if (out.features.empty()) throw EmptyStructureError("no superpixel is associated with the structure");
  return out;
}

SpatialGraph build_rag(const SegmentationMap& seg, const SuperpixelNodes& nodes) {
  SpatialGraph g;
  g.nodes = nodes.features;
  g.method = GraphMethod::Rag;
  for (int r = 0; r < seg.rows; ++r) {
    for (int c = 0; c < seg.cols; ++c) {
      const int a = nodes.node_of_segment[seg.at(r, c)];
      if (a < 0) continue;
      if (c + 1 < seg.cols) {
        const int b = nodes.node_of_segment[seg.at(r, c + 1)];
        if (b >= 0 && b != a) g.edges.emplace_back(a, b);
      }
      if (r + 1 < seg.rows) {
        const int b = nodes.node_of_segment[seg.at(r + 1, c)];
        if (b >= 0 && b != a) g.edges.emplace_back(a, b);
      }
    }
  }
  finish_edges(g);
  return g;
}

SpatialGraph build_ball_query(const std::vector<NodeFeature>& features, double radius) {
  if (!(radius > 0.0)) throw ArgumentError("ball query radius must be positive");
  SpatialGraph g;
  g.nodes = features;
  g.method = GraphMethod::Ball;
  g.radius = radius;
  const int n = static_cast<int>(features.size());
  if (n == 0) return g;

  double xmin = features[0].x, ymin = features[0].y;
  for (const auto& f : features) {
    xmin = std::min(xmin, f.x);
    ymin = std::min(ymin, f.y);
  }
  auto bucket = [&](double v, double lo) { return static_cast<long long>(std::floor((v - lo) / radius)); };
  std::map<std::pair<long long, long long>, std::vector<int>> grid;
  for (int i = 0; i < n; ++i) grid[{bucket(features[i].x, xmin), bucket(features[i].y, ymin)}].push_back(i);

  const double r2 = radius * radius;
  for (int i = 0; i < n; ++i) {
    const long long bx = bucket(features[i].x, xmin);
    const long long by = bucket(features[i].y, ymin);
    for (long long dx = -1; dx <= 1; ++dx) {
      for (long long dy = -1; dy <= 1; ++dy) {
        const auto it = grid.find({bx + dx, by + dy});
        if (it == grid.end()) continue;
        for (int j : it->second) {
          if (j <= i) continue;
          const double ex = features[j].x - features[i].x;
          const double ey = features[j].y - features[i].y;
          if (ex * ex + ey * ey <= r2) g.edges.emplace_back(i, j);
        }
      }
    }
  }
  finish_edges(g);
  return g;
}

SpatialGraph build_exact(const ColumnSpec& spec, const Bitmap& bitmap) {
  SpatialGraph g;
  g.method = GraphMethod::Exact;
  g.id = spec.id;
  switch (spec.kind) {
    case SubDataset::Sub1: {
      const double cell = spec.width / bitmap.cols;
      const double length = cell * bitmap.rows;
      std::vector<int> node(bitmap.cells.size(), -1);
      for (int r = 0; r < bitmap.rows; ++r) {
        for (int c = 0; c < bitmap.cols; ++c) {
          if (!bitmap.at(r, c)) continue;
          node[static_cast<std::size_t>(r) * bitmap.cols + c] = g.node_count();
          g.nodes.push_back({(c + 0.5) * cell, length - (r + 0.5) * cell, 1.0, 0.0});
        }
      }
      for (int r = 0; r < bitmap.rows; ++r) {
        for (int c = 0; c < bitmap.cols; ++c) {
          const int a = node[static_cast<std::size_t>(r) * bitmap.cols + c];
          if (a < 0) continue;
          if (c + 1 < bitmap.cols) {
            const int b = node[static_cast<std::size_t>(r) * bitmap.cols + c + 1];
            if (b >= 0) g.edges.emplace_back(a, b);
          }
          if (r + 1 < bitmap.rows) {
            const int b = node[static_cast<std::size_t>(r + 1) * bitmap.cols + c];
            if (b >= 0) g.edges.emplace_back(a, b);
          }
        }
      }
      break;
    }
    case SubDataset::Sub2: {
      const double cell = spec.width / bitmap.cols;
      std::vector<Ring> rings;
      for (const auto& p : spec.primitives) {
        if (const auto* ring = std::get_if<Ring>(&p.shape)) rings.push_back(*ring);
      }
      for (const auto& ring : rings) {
        const double area = M_PI * (ring.outer * ring.outer - ring.inner * ring.inner) / (cell * cell);
        g.nodes.push_back({ring.cx, ring.cy, area, 0.0});
      }
      for (int i = 0; i < static_cast<int>(rings.size()); ++i) {
        for (int j = i + 1; j < static_cast<int>(rings.size()); ++j) {
          const double dx = rings[j].cx - rings[i].cx;
          const double dy = rings[j].cy - rings[i].cy;
          const double reach = rings[i].outer + rings[j].outer;
          if (dx * dx + dy * dy < reach * reach) g.edges.emplace_back(i, j);
        }
      }
      break;
    }
    case SubDataset::Sub3:
      throw UnsupportedRepresentationError(
          "trimmed rings of sub-dataset 3 have no exact graph representation");
  }
  finish_edges(g);
  return g;
}

NormalizationStats compute_stats(const std::vector<SpatialGraph>& graphs, double width) {
  NormalizationStats s;
  s.width = width;
  s.area_min = s.ecc_min = std::numeric_limits<double>::infinity();
  s.area_max = s.ecc_max = -std::numeric_limits<double>::infinity();
  for (const auto& g : graphs) {
    for (const auto& f : g.nodes) {
      s.area_min = std::min(s.area_min, f.area);
      s.area_max = std::max(s.area_max, f.area);
      s.ecc_min = std::min(s.ecc_min, f.eccentricity);
      s.ecc_max = std::max(s.ecc_max, f.eccentricity);
    }
  }
  if (!std::isfinite(s.area_min)) throw ArgumentError("cannot compute statistics of graphs without nodes");
  return s;
}

NormalizedDataset normalize_features(std::vector<SpatialGraph> graphs,
                                     const std::optional<NormalizationStats>& stats) {
  if (graphs.empty()) throw ArgumentError("cannot normalize an empty dataset");
  for (const auto& g : graphs) {
    if (g.normalized) throw ArgumentError("graph '" + g.id + "' is already normalized");
  }
  NormalizedDataset out;
  out.stats = stats ? *stats : compute_stats(graphs);
  const auto& s = out.stats;
  const double area_span = s.area_max - s.area_min;
  const double ecc_span = s.ecc_max - s.ecc_min;
  if (!(area_span > 0.0)) out.warnings.push_back("degenerate area range; area mapped to 0");
  if (!(ecc_span > 0.0)) out.warnings.push_back("degenerate eccentricity range; eccentricity mapped to 0");
  for (auto& g : graphs) {
    for (auto& f : g.nodes) {
      f.x /= s.width;
      f.y /= s.width;
      f.area = area_span > 0.0 ? (f.area - s.area_min) / area_span : 0.0;
      f.eccentricity = ecc_span > 0.0 ? (f.eccentricity - s.ecc_min) / ecc_span : 0.0;
    }
    g.radius /= s.width;
    g.normalized = true;
  }
  out.graphs = std::move(graphs);
  return out;
}

}  // namespace buckle
