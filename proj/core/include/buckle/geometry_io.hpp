#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "buckle/geometry.hpp"

namespace buckle {

std::string spec_to_json(const ColumnSpec& spec);
ColumnSpec spec_from_json(const std::string& text);

/// Binary PGM (P5), 255 for material, row 0 first.
void write_pgm(std::ostream& out, const Bitmap& bitmap);
Bitmap read_pgm(std::istream& in);

/// JSON sidecar: {"rows", "cols", "resolution", "spec_id"}.
std::string bitmap_sidecar_json(const Bitmap& bitmap);

enum class Split { Train, Val, Test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestRow {
  std::string id;
  SubDataset kind = SubDataset::Sub1;
  std::uint64_t seed = 0;
  std::optional<Label> label;  // empty until simulated
  Split split = Split::Train;
  bool operator==(const ManifestRow&) const = default;
};

/// CSV with header "id,kind,seed,label,split"; an unknown label is an empty field.
void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(std::istream& in);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace buckle
