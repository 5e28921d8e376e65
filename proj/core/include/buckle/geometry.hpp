#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace buckle {

enum class SubDataset { Sub1 = 1, Sub2 = 2, Sub3 = 3 };

std::string to_string(SubDataset kind);
/// Accepts "1"/"2"/"3", "sub1".."sub3" and "Sub1".."Sub3".
SubDataset parse_sub_dataset(const std::string& text);

/// Binary class label: 0 buckles left, 1 buckles right.
using Label = int;

/// Axis-aligned rectangle [x0, x0 + width) x [y0, y0 + height).
struct Block {
  double x0 = 0.0;
  double y0 = 0.0;
  double height = 0.0;
  double width = 0.0;
  bool operator==(const Block&) const = default;
};

/// Annulus with inner <= |p - c| < outer.
struct Ring {
  double cx = 0.0;
  double cy = 0.0;
  double outer = 0.0;
  double inner = 0.0;
  bool operator==(const Ring&) const = default;
};

struct Primitive {
  std::variant<Block, Ring> shape;
  int order_index = 0;
  bool operator==(const Primitive&) const = default;
};

/// Parametric description of one column. Coordinates are physical with the
/// origin at the bottom-left corner, x across the width and y along the length.
struct ColumnSpec {
  SubDataset kind = SubDataset::Sub1;
  double width = 1.0;
  double length = 8.0;
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;
  std::string id;
  int resamples = 0;
  bool operator==(const ColumnSpec&) const = default;
};

/// Defaults reproduce the published generation rules.
struct GenerationConfig {
  int sub1_interior_blocks = 38;
  int sub2_min_rings = 200;
  int sub2_max_rings = 300;
  int sub3_rings = 1000;
  int resample_budget = 100;
  /// Raster used by the connectivity check; 0 selects the per-kind default.
  int check_rows = 0;
  int check_cols = 0;
};

/// Desk-scale raster default: 160x20 for Sub1, 240x30 for Sub2/Sub3.
std::pair<int, int> default_fea_raster(SubDataset kind);

enum class Resolution { Full, DeskScale };

/// Row-major occupancy raster. Row 0 is the top of the column (y = L), as in
/// the PGM image; cells are square with side width / cols.
struct Bitmap {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> cells;
  std::string spec_id;

  Bitmap() = default;
  Bitmap(int rows, int cols, std::uint8_t fill = 0);

  bool at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { cells[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
  std::size_t occupied_count() const;
  Resolution resolution() const { return rows == 800 && cols == 100 ? Resolution::Full : Resolution::DeskScale; }
  bool operator==(const Bitmap&) const = default;
};

enum class ReflectionAxis { X, Y, Both };

/// Deterministic in (kind, seed, cfg). Candidates failing the connectivity
/// check are redrawn from the next sub-stream; throws GenerationError once
/// cfg.resample_budget redraws are spent.
ColumnSpec gen_geometry(SubDataset kind, std::uint64_t seed, const GenerationConfig& cfg = {});

/// Cell (r, c) is occupied iff its center lies in the material region.
/// Blocks and Sub2 rings are unions; Sub3 rings are applied in order, each
/// adding its annulus and clearing its inner disk. End caps go last.
Bitmap rasterize(const ColumnSpec& spec, int rows, int cols);

/// X mirrors top/bottom (label kept); Y mirrors left/right (label flipped).
std::pair<Bitmap, Label> reflect(const Bitmap& bitmap, ReflectionAxis axis, Label label);

/// True iff the top and bottom rows are fully occupied and all occupied cells
/// form one 4-connected component.
bool connectivity_check(const Bitmap& bitmap);

}  // namespace buckle
