#include "buckle/geometry_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "buckle/error.hpp"

namespace buckle {

using nlohmann::json;

std::string spec_to_json(const ColumnSpec& spec) {
  json prims = json::array();
  for (const auto& p : spec.primitives) {
    if (const auto* b = std::get_if<Block>(&p.shape)) {
      prims.push_back({{"type", "block"},
                       {"order", p.order_index},
                       {"x0", b->x0},
                       {"y0", b->y0},
                       {"height", b->height},
                       {"width", b->width}});
    } else {
      const auto& g = std::get<Ring>(p.shape);
      prims.push_back({{"type", "ring"},
                       {"order", p.order_index},
                       {"cx", g.cx},
                       {"cy", g.cy},
                       {"outer", g.outer},
                       {"inner", g.inner}});
    }
  }
  json j = {{"id", spec.id},
            {"kind", to_string(spec.kind)},
            {"seed", spec.seed},
            {"width", spec.width},
            {"length", spec.length},
            {"resamples", spec.resamples},
            {"primitives", std::move(prims)}};
  return j.dump();
}

ColumnSpec spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ColumnSpec spec;
    spec.id = j.at("id").get<std::string>();
    spec.kind = parse_sub_dataset(j.at("kind").get<std::string>());
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.width = j.at("width").get<double>();
    spec.length = j.at("length").get<double>();
    spec.resamples = j.value("resamples", 0);
    for (const auto& p : j.at("primitives")) {
      Primitive prim;
      prim.order_index = p.at("order").get<int>();
      if (p.at("type") == "block") {
        prim.shape = Block{p.at("x0").get<double>(), p.at("y0").get<double>(),
                           p.at("height").get<double>(), p.at("width").get<double>()};
      } else if (p.at("type") == "ring") {
        prim.shape = Ring{p.at("cx").get<double>(), p.at("cy").get<double>(),
                          p.at("outer").get<double>(), p.at("inner").get<double>()};
      } else {
        throw FormatError("unknown primitive type");
      }
      spec.primitives.push_back(prim);
    }
    return spec;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed column spec: ") + e.what());
  }
}

void write_pgm(std::ostream& out, const Bitmap& bitmap) {
  out << "P5\n" << bitmap.cols << ' ' << bitmap.rows << "\n255\n";
  std::string row(static_cast<std::size_t>(bitmap.cols), '\0');
  for (int r = 0; r < bitmap.rows; ++r) {
    for (int c = 0; c < bitmap.cols; ++c) row[c] = bitmap.at(r, c) ? static_cast<char>(255) : '\0';
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

Bitmap read_pgm(std::istream& in) {
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || cols <= 0 || rows <= 0 || maxval != 255) throw FormatError("not a P5 bitmap");
  in.get();
  Bitmap bm(rows, cols);
  std::string row(static_cast<std::size_t>(cols), '\0');
  for (int r = 0; r < rows; ++r) {
    if (!in.read(row.data(), cols)) throw FormatError("truncated PGM");
    for (int c = 0; c < cols; ++c) bm.set(r, c, row[c] != '\0');
  }
  return bm;
}

std::string bitmap_sidecar_json(const Bitmap& bitmap) {
  json j = {{"rows", bitmap.rows},
            {"cols", bitmap.cols},
            {"resolution", bitmap.resolution() == Resolution::Full ? "full" : "desk"},
            {"spec_id", bitmap.spec_id}};
  return j.dump();
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw FormatError("unknown split '" + text + "'");
}

void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows) {
  out << "id,kind,seed,label,split\n";
  for (const auto& r : rows) {
    out << r.id << ',' << static_cast<int>(r.kind) << ',' << r.seed << ',';
    if (r.label) out << *r.label;
    out << ',' << to_string(r.split) << '\n';
  }
}

std::vector<ManifestRow> read_manifest(std::istream& in) {
  std::vector<ManifestRow> rows;
  std::string line;
  if (!std::getline(in, line) || line != "id,kind,seed,label,split") {
    throw FormatError("manifest header mismatch");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 5) throw FormatError("manifest row has " + std::to_string(f.size()) + " fields");
    ManifestRow row;
    row.id = f[0];
    row.kind = parse_sub_dataset(f[1]);
    row.seed = std::stoull(f[2]);
    if (!f[3].empty()) row.label = std::stoi(f[3]);
    row.split = parse_split(f[4]);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace buckle
