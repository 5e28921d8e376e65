#include "buckle/graph_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "buckle/error.hpp"

namespace buckle {

using nlohmann::json;

std::string graph_to_json(const SpatialGraph& graph) {
  json j;
  j["id"] = graph.id;
  j["label"] = graph.label;
  j["method"] = to_string(graph.method);
  j["density"] = to_string(graph.density);
  j["r"] = graph.radius;
  j["normalized"] = graph.normalized;
  json nodes = json::array();
  for (const auto& n : graph.nodes) nodes.push_back({n.x, n.y, n.area, n.eccentricity});
  j["nodes"] = std::move(nodes);
  json edges = json::array();
  for (const auto& [a, b] : graph.edges) {
    if (a != b) edges.push_back({a, b});
  }
  j["edges"] = std::move(edges);
  return j.dump();
}

SpatialGraph graph_from_json(const std::string& text) {
  SpatialGraph g;
  try {
    const json j = json::parse(text);
    g.id = j.at("id").get<std::string>();
    g.label = j.at("label").get<int>();
    g.method = parse_method(j.at("method").get<std::string>());
    g.density = parse_density(j.at("density").get<std::string>());
    g.radius = j.at("r").get<double>();
    g.normalized = j.value("normalized", false);
    for (const auto& n : j.at("nodes")) {
      if (n.size() != 4) throw FormatError("node entry must have 4 values");
      g.nodes.push_back({n[0].get<double>(), n[1].get<double>(), n[2].get<double>(), n[3].get<double>()});
    }
    const int count = g.node_count();
    for (int i = 0; i < count; ++i) g.edges.emplace_back(i, i);
    for (const auto& e : j.at("edges")) {
      int a = e.at(0).get<int>(), b = e.at(1).get<int>();
      if (a < 0 || b < 0 || a >= count || b >= count) throw FormatError("edge index out of range");
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      g.edges.emplace_back(a, b);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed graph record: ") + e.what());
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

void write_graphs_jsonl(std::ostream& out, const std::vector<SpatialGraph>& graphs) {
  for (const auto& g : graphs) out << graph_to_json(g) << '\n';
}

std::vector<SpatialGraph> read_graphs_jsonl(std::istream& in) {
  std::vector<SpatialGraph> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(graph_from_json(line));
  }
  return out;
}

namespace {

constexpr char kGraphMagic[8] = {'B', 'K', 'L', 'G', 'R', 'P', 'H', '1'};
constexpr std::uint32_t kGraphBinaryVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("truncated graph file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace

void write_graphs_binary(std::ostream& out, const std::vector<SpatialGraph>& graphs) {
  out.write(kGraphMagic, sizeof kGraphMagic);
  put<std::uint32_t>(out, kGraphBinaryVersion);
  put<std::uint64_t>(out, graphs.size());
  for (const auto& g : graphs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.id.size()));
    out.write(g.id.data(), static_cast<std::streamsize>(g.id.size()));
    put<std::int32_t>(out, g.label);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(g.method));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(g.density));
    put<double>(out, g.radius);
    put<std::uint8_t>(out, g.normalized ? 1 : 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.nodes.size()));
    for (const auto& n : g.nodes) {
      put(out, n.x);
      put(out, n.y);
      put(out, n.area);
      put(out, n.eccentricity);
    }
    std::uint32_t m = 0;
    for (const auto& [a, b] : g.edges) m += a != b ? 1 : 0;
    put<std::uint32_t>(out, m);
    for (const auto& [a, b] : g.edges) {
      if (a == b) continue;
      put<std::uint32_t>(out, static_cast<std::uint32_t>(a));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(b));
    }
  }
}

std::vector<SpatialGraph> read_graphs_binary(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kGraphMagic, sizeof magic) != 0) {
    throw FormatError("not a binary graph file (bad magic)");
  }
  if (get<std::uint32_t>(in) != kGraphBinaryVersion) throw FormatError("unsupported graph file version");
  const auto count = get<std::uint64_t>(in);
  std::vector<SpatialGraph> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    SpatialGraph g;
    g.id.resize(get<std::uint32_t>(in));
    if (!in.read(g.id.data(), static_cast<std::streamsize>(g.id.size()))) throw FormatError("truncated graph id");
    g.label = get<std::int32_t>(in);
    const auto method = get<std::uint8_t>(in);
    const auto density = get<std::uint8_t>(in);
    if (method > 2 || density > 2) throw FormatError("bad graph method or density code");
    g.method = static_cast<GraphMethod>(method);
    g.density = static_cast<Density>(density);
    g.radius = get<double>(in);
    g.normalized = get<std::uint8_t>(in) != 0;
    const auto n = get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n; ++i) {
      NodeFeature f;
      f.x = get<double>(in);
      f.y = get<double>(in);
      f.area = get<double>(in);
      f.eccentricity = get<double>(in);
      g.nodes.push_back(f);
      g.edges.emplace_back(static_cast<int>(i), static_cast<int>(i));
    }
    const auto m = get<std::uint32_t>(in);
    for (std::uint32_t e = 0; e < m; ++e) {
      auto a = get<std::uint32_t>(in), b = get<std::uint32_t>(in);
      if (a >= n || b >= n) throw FormatError("edge index out of range");
      if (a > b) std::swap(a, b);
      if (a != b) g.edges.emplace_back(static_cast<int>(a), static_cast<int>(b));
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    out.push_back(std::move(g));
  }
  return out;
}

std::string stats_to_json(const NormalizationStats& s) {
  json j;
  j["width"] = s.width;
  j["area_min"] = s.area_min;
  j["area_max"] = s.area_max;
  j["ecc_min"] = s.ecc_min;
  j["ecc_max"] = s.ecc_max;
  return j.dump(2);
}

NormalizationStats stats_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    NormalizationStats s;
    s.width = j.at("width").get<double>();
    s.area_min = j.at("area_min").get<double>();
    s.area_max = j.at("area_max").get<double>();
    s.ecc_min = j.at("ecc_min").get<double>();
    s.ecc_max = j.at("ecc_max").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed normalization stats: ") + e.what());
  }
}

}  // namespace buckle
