#include "buckle/gnn_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "buckle/error.hpp"

namespace buckle {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'B', 'K', 'L', 'G', 'N', 'N', '0', '1'};

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("truncated model blob");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
};

template <typename M>
void add(std::vector<TensorRef>& v, const std::string& name, M& m) {
  v.push_back({name, m.data(), m.rows(), m.cols()});
}

std::vector<TensorRef> tensors(ModelParams& p) {
  std::vector<TensorRef> v;
  for (int l = 0; l < kLayers; ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    add(v, pre + "w1", L.w1);
    add(v, pre + "b1", L.b1);
    add(v, pre + "w2", L.w2);
    add(v, pre + "b2", L.b2);
    add(v, pre + "bn.gamma", L.gamma);
    add(v, pre + "bn.beta", L.beta);
    add(v, pre + "bn.running_mean", L.running_mean);
    add(v, pre + "bn.running_var", L.running_var);
  }
  add(v, "classifier.weight", p.classifier);
  add(v, "classifier.bias", p.classifier_bias);
  return v;
}

}  // namespace

void write_model_blob(std::ostream& out, const ModelParams& params, const std::string& meta_json) {
  ModelParams copy = params;
  const auto refs = tensors(copy);
  json header;
  header["format"] = "buckle-gnn";
  header["version"] = kModelBlobVersion;
  header["dims"] = {{"node_features", kNodeFeatures}, {"edge_features", kEdgeFeatures},
                    {"hidden", kHidden},               {"embed", kEmbed},
                    {"layers", kLayers},               {"classes", kClasses}};
  header["seed"] = params.seed;
  header["slope"] = params.slope;
  header["bn_momentum"] = params.bn_momentum;
  header["bn_eps"] = params.bn_eps;
  json list = json::array();
  for (const auto& t : refs) list.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  header["tensors"] = std::move(list);
  try {
    header["meta"] = json::parse(meta_json);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("model meta is not valid JSON: ") + e.what());
  }
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kModelBlobVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : refs) {
    for (Eigen::Index k = 0; k < t.rows * t.cols; ++k) put_le<double>(out, t.data[k]);
  }
}

std::pair<ModelParams, std::string> read_model_blob(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError("not a model blob (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kModelBlobVersion) {
    throw FormatError("unsupported model blob version " + std::to_string(version));
  }
  const auto len = get_le<std::uint32_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw FormatError("truncated model blob header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad model blob header: ") + e.what());
  }
  ModelParams p = init_model(0);
  p.seed = header.at("seed").get<std::uint64_t>();
  p.slope = header.at("slope").get<double>();
  p.bn_momentum = header.at("bn_momentum").get<double>();
  p.bn_eps = header.at("bn_eps").get<double>();
  const auto refs = tensors(p);
  const auto& list = header.at("tensors");
  if (list.size() != refs.size()) throw ShapeError("model blob tensor count mismatch");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& t = refs[k];
    if (list[k].at("name").get<std::string>() != t.name ||
        list[k].at("rows").get<Eigen::Index>() != t.rows ||
        list[k].at("cols").get<Eigen::Index>() != t.cols) {
      throw ShapeError("model blob tensor '" + t.name + "' has unexpected shape");
    }
    for (Eigen::Index q = 0; q < t.rows * t.cols; ++q) t.data[q] = get_le<double>(in);
  }
  return {std::move(p), header.value("meta", json::object()).dump()};
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_loss,val_acc\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_acc);
    out << buf;
  }
}

std::vector<EpochRecord> read_history_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_acc") {
    throw FormatError("history CSV header mismatch");
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf", &r.epoch, &r.train_loss, &r.val_acc) != 3) {
      throw FormatError("bad history row: " + line);
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace buckle
