#include "buckle/geometry.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <deque>

#include "buckle/error.hpp"
#include "buckle/rng.hpp"

namespace buckle {

namespace {

constexpr double kCapFraction = 0.05;         // Sub2/Sub3 end caps, fraction of L
constexpr double kSub1BlockFraction = 0.025;  // block height, fraction of L

std::string make_id(SubDataset kind, std::uint64_t seed) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%d-%016llx", static_cast<int>(kind),
                static_cast<unsigned long long>(seed));
  return buf;
}

void push_block(ColumnSpec& spec, double x0, double y0, double h, double w) {
  spec.primitives.push_back(
      Primitive{Block{x0, y0, h, w}, static_cast<int>(spec.primitives.size())});
}

void push_ring(ColumnSpec& spec, double cx, double cy, double outer, double inner) {
  spec.primitives.push_back(
      Primitive{Ring{cx, cy, outer, inner}, static_cast<int>(spec.primitives.size())});
}

void push_end_caps(ColumnSpec& spec) {
  const double cap = kCapFraction * spec.length;
  push_block(spec, 0.0, 0.0, cap, spec.width);
  push_block(spec, 0.0, spec.length - cap, cap, spec.width);
}

// Stream order per candidate: Sub1 draws (width, x0) per interior block bottom
// to top; Sub2 draws the ring count then (cx, cy) per ring; Sub3 draws
// (R, r, cx, cy) per ring.
ColumnSpec draw_candidate(SubDataset kind, CounterRng& rng, const GenerationConfig& cfg) {
  ColumnSpec spec;
  spec.kind = kind;
  const double w = spec.width;
  const double L = spec.length;
  switch (kind) {
    case SubDataset::Sub1: {
      const double h = kSub1BlockFraction * L;
      push_block(spec, 0.0, 0.0, h, w);
      for (int k = 0; k < cfg.sub1_interior_blocks; ++k) {
        const double bw = rng.uniform(0.4 * w, 0.9 * w);
        const double x0 = rng.uniform(0.0, w - bw);
        push_block(spec, x0, h * (k + 1), h, bw);
      }
      push_block(spec, 0.0, h * (cfg.sub1_interior_blocks + 1), h, w);
      break;
    }
    case SubDataset::Sub2: {
      const auto count = rng.uniform_int(cfg.sub2_min_rings, cfg.sub2_max_rings);
      for (std::int64_t k = 0; k < count; ++k) {
        const double cx = rng.uniform(0.25 * w, 0.75 * w);
        const double cy = rng.uniform(kCapFraction * L, (1.0 - kCapFraction) * L);
        push_ring(spec, cx, cy, 0.25 * w, 0.15 * w);
      }
      push_end_caps(spec);
      break;
    }
    case SubDataset::Sub3: {
      for (int k = 0; k < cfg.sub3_rings; ++k) {
        const double outer = rng.uniform(0.1 * w, 0.25 * w);
        const double inner = rng.uniform(0.35 * outer, 0.75 * outer);
        const double cx = rng.uniform(outer, w - outer);
        const double cy = rng.uniform(kCapFraction * L, (1.0 - kCapFraction) * L);
        push_ring(spec, cx, cy, outer, inner);
      }
      push_end_caps(spec);
      break;
    }
  }
  return spec;
}

struct CellFrame {
  double cell;  // side length
  double length;
  int rows;
  double x(int c) const { return (c + 0.5) * cell; }
  double y(int r) const { return length - (r + 0.5) * cell; }
  // Inclusive row range whose centers may lie in [ylo, yhi].
  std::pair<int, int> rows_for(double ylo, double yhi) const {
    const int r0 = std::max(0, static_cast<int>(std::floor((length - yhi) / cell - 0.5)));
    const int r1 = std::min(rows - 1, static_cast<int>(std::ceil((length - ylo) / cell - 0.5)));
    return {r0, r1};
  }
};

void paint_block(Bitmap& bm, const CellFrame& f, const Block& b) {
  const auto [r0, r1] = f.rows_for(b.y0, b.y0 + b.height);
  for (int r = r0; r <= r1; ++r) {
    const double y = f.y(r);
    if (y < b.y0 || y >= b.y0 + b.height) continue;
    for (int c = 0; c < bm.cols; ++c) {
      const double x = f.x(c);
      if (x >= b.x0 && x < b.x0 + b.width) bm.set(r, c, true);
    }
  }
}

void paint_ring(Bitmap& bm, const CellFrame& f, const Ring& g, bool trim) {
  const auto [r0, r1] = f.rows_for(g.cy - g.outer, g.cy + g.outer);
  const double o2 = g.outer * g.outer;
  const double i2 = g.inner * g.inner;
  for (int r = r0; r <= r1; ++r) {
    const double dy = f.y(r) - g.cy;
    for (int c = 0; c < bm.cols; ++c) {
      const double dx = f.x(c) - g.cx;
      const double d2 = dx * dx + dy * dy;
      if (d2 >= o2) continue;
      if (d2 >= i2) {
        bm.set(r, c, true);
      } else if (trim) {
        bm.set(r, c, false);
      }
    }
  }
}

}  // namespace

std::string to_string(SubDataset kind) {
  return "sub" + std::to_string(static_cast<int>(kind));
}

SubDataset parse_sub_dataset(const std::string& text) {
  std::string t;
  for (char ch : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (t == "1" || t == "sub1") return SubDataset::Sub1;
  if (t == "2" || t == "sub2") return SubDataset::Sub2;
  if (t == "3" || t == "sub3") return SubDataset::Sub3;
  throw ArgumentError("unknown sub-dataset '" + text + "' (expected 1, 2 or 3)");
}

std::pair<int, int> default_fea_raster(SubDataset kind) {
  return kind == SubDataset::Sub1 ? std::pair{160, 20} : std::pair{240, 30};
}

Bitmap::Bitmap(int r, int c, std::uint8_t fill)
    : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c, fill ? 1 : 0) {}

std::size_t Bitmap::occupied_count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

ColumnSpec gen_geometry(SubDataset kind, std::uint64_t seed, const GenerationConfig& cfg) {
  if (cfg.sub1_interior_blocks < 0 || cfg.sub2_min_rings < 0 ||
      cfg.sub2_max_rings < cfg.sub2_min_rings || cfg.sub3_rings < 0 || cfg.resample_budget < 0) {
    throw ArgumentError("invalid generation config");
  }
  auto [rows, cols] = default_fea_raster(kind);
  if (cfg.check_rows > 0) rows = cfg.check_rows;
  if (cfg.check_cols > 0) cols = cfg.check_cols;

  for (int attempt = 0; attempt <= cfg.resample_budget; ++attempt) {
    CounterRng rng(derive_key(seed, static_cast<std::uint64_t>(attempt)));
    ColumnSpec spec = draw_candidate(kind, rng, cfg);
    spec.seed = seed;
    spec.id = make_id(kind, seed);
    spec.resamples = attempt;
    if (connectivity_check(rasterize(spec, rows, cols))) return spec;
  }
  throw GenerationError("generation failed for " + to_string(kind) + " seed " +
                        std::to_string(seed) + ": no connected geometry within " +
                        std::to_string(cfg.resample_budget) + " resamples");
}

Bitmap rasterize(const ColumnSpec& spec, int rows, int cols) {
  if (cols < 16 || rows != 8 * cols) {
    throw ArgumentError("raster must satisfy rows = 8 * cols and cols >= 16 (got " +
                        std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  Bitmap bm(rows, cols);
  bm.spec_id = spec.id;
  const CellFrame frame{spec.width / cols, spec.length, rows};
  const bool trim = spec.kind == SubDataset::Sub3;

  std::vector<const Block*> caps;
  for (const auto& p : spec.primitives) {
    if (const auto* g = std::get_if<Ring>(&p.shape)) {
      paint_ring(bm, frame, *g, trim);
    } else {
      const auto& b = std::get<Block>(p.shape);
      // Ring datasets apply their full-width caps after all rings.
      if (spec.kind != SubDataset::Sub1) {
        caps.push_back(&b);
      } else {
        paint_block(bm, frame, b);
      }
    }
  }
  for (const Block* b : caps) paint_block(bm, frame, *b);
  return bm;
}

std::pair<Bitmap, Label> reflect(const Bitmap& bitmap, ReflectionAxis axis, Label label) {
  const bool flip_rows = axis == ReflectionAxis::X || axis == ReflectionAxis::Both;
  const bool flip_cols = axis == ReflectionAxis::Y || axis == ReflectionAxis::Both;
  Bitmap out(bitmap.rows, bitmap.cols);
  out.spec_id = bitmap.spec_id;
  for (int r = 0; r < bitmap.rows; ++r) {
    const int rr = flip_rows ? bitmap.rows - 1 - r : r;
    for (int c = 0; c < bitmap.cols; ++c) {
      const int cc = flip_cols ? bitmap.cols - 1 - c : c;
      out.set(rr, cc, bitmap.at(r, c));
    }
  }
  return {std::move(out), flip_cols ? 1 - label : label};
}

bool connectivity_check(const Bitmap& bitmap) {
  const int R = bitmap.rows;
  const int C = bitmap.cols;
  if (R == 0 || C == 0) return false;
  for (int c = 0; c < C; ++c) {
    if (!bitmap.at(0, c) || !bitmap.at(R - 1, c)) return false;
  }
  std::vector<std::uint8_t> seen(bitmap.cells.size(), 0);
  std::deque<int> queue{0};
  seen[0] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    const int idx = queue.front();
    queue.pop_front();
    const int r = idx / C;
    const int c = idx % C;
    const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (const auto& n : nbr) {
      if (n[0] < 0 || n[0] >= R || n[1] < 0 || n[1] >= C) continue;
      const int j = n[0] * C + n[1];
      if (seen[j] || !bitmap.cells[j]) continue;
      seen[j] = 1;
      ++reached;
      queue.push_back(j);
    }
  }
  return reached == bitmap.occupied_count();
}

}  // namespace buckle
