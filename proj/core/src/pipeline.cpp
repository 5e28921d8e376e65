#include "buckle/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "buckle/ensemble.hpp"
#include "buckle/error.hpp"
#include "buckle/geometry_io.hpp"
#include "buckle/gnn_io.hpp"
#include "buckle/graph_io.hpp"
#include "buckle/rng.hpp"

namespace buckle {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Voting voting) {
  switch (voting) {
    case Voting::Hard: return "hard";
    case Voting::Soft: return "soft";
    case Voting::Both: return "both";
  }
  return "both";
}

Voting parse_voting(const std::string& text) {
  if (text == "hard") return Voting::Hard;
  if (text == "soft") return Voting::Soft;
  if (text == "both") return Voting::Both;
  throw ConfigError("voting must be hard, soft or both (got '" + text + "')");
}

namespace {
constexpr const char* kStageNames[] = {"generate", "simulate", "graphify",  "train",
                                       "evaluate", "ensemble", "calibrate", "pipeline"};
}

std::string to_string(Stage stage) { return kStageNames[static_cast<int>(stage)]; }

Stage parse_stage(const std::string& text) {
  for (int k = 0; k < 8; ++k) {
    if (text == kStageNames[k]) return static_cast<Stage>(k);
  }
  throw ConfigError("unknown stage '" + text + "'");
}

PipelineConfig PipelineConfig::defaults_for(SubDataset kind) {
  PipelineConfig c;
  c.sub_dataset = kind;
  if (kind == SubDataset::Sub1) {
    c.density = Density::Medium;
    c.radius = 0.4;
  } else {
    c.density = Density::Dense;
    c.radius = 0.3;
  }
  return c;
}

std::pair<int, int> PipelineConfig::fea_raster() const {
  if (raster_rows > 0 && raster_cols > 0) return {raster_rows, raster_cols};
  return default_fea_raster(sub_dataset);
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (train_count < 1) fail("counts.train must be >= 1");
  if (val_count < 0 || test_count < 1) fail("counts.val must be >= 0 and counts.test >= 1");
  const auto [rr, rc] = fea_raster();
  if (rc < 16 || rr != 8 * rc) fail("raster must be rows = 8 x cols with cols >= 16");
  if (graph_cols < 16 || graph_rows != 8 * graph_cols) fail("graph raster must be rows = 8 x cols with cols >= 16");
  if (!(youngs_modulus > 0.0) || !(poisson_ratio >= 0.0 && poisson_ratio < 0.5)) {
    fail("material needs E > 0 and 0 <= nu < 0.5");
  }
  if (!(solver.increment > 0.0) || !(solver.stop_ratio > 0.0) || !(solver.newton_rel_tol > 0.0) ||
      solver.newton_max_iter < 1 || solver.max_step_halvings < 0 || !(solver.max_compression > 0.0)) {
    fail("solver settings must be positive");
  }
  if (!(radius > 0.0)) fail("graph.radius must be positive");
  if (!(compactness > 0.0)) fail("graph.compactness must be positive");
  if (train.epochs < 1) fail("train.epochs must be >= 1");
  if (!(train.lr > 0.0)) fail("train.lr must be positive");
  if (train.batch_size < 1) fail("train.batch_size must be >= 1");
  if (train.bn_recalibration < 0) fail("train.bn_recalibration must be >= 0");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0) ||
      !(train.eps > 0.0)) {
    fail("Adam betas must lie in [0, 1) and eps > 0");
  }
  if (num_seeds < 1) fail("ensemble.num_seeds must be >= 1");
  if (calibration_bins < 2) fail("ensemble.bins must be >= 2");
  if (output_dir.empty()) fail("output_dir must not be empty");
}

namespace {

json solver_json(const SolverConfig& s) {
  return {{"increment", s.increment},
          {"stop_ratio", s.stop_ratio},
          {"newton_rel_tol", s.newton_rel_tol},
          {"newton_max_iter", s.newton_max_iter},
          {"max_step_halvings", s.max_step_halvings},
          {"max_compression", s.max_compression}};
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},         {"lr", t.lr},           {"beta1", t.beta1},
          {"beta2", t.beta2},           {"eps", t.eps},         {"batch_size", t.batch_size},
          {"shuffle", t.shuffle},       {"bn_recalibration", t.bn_recalibration}};
}

json to_json(const PipelineConfig& c) {
  return {{"sub_dataset", static_cast<int>(c.sub_dataset)},
          {"counts", {{"train", c.train_count}, {"val", c.val_count}, {"test", c.test_count}}},
          {"raster", {{"rows", c.raster_rows}, {"cols", c.raster_cols}}},
          {"graph_raster", {{"rows", c.graph_rows}, {"cols", c.graph_cols}}},
          {"material", {{"E", c.youngs_modulus}, {"nu", c.poisson_ratio}}},
          {"solver", solver_json(c.solver)},
          {"graph",
           {{"method", to_string(c.method)},
            {"density", to_string(c.density)},
            {"radius", c.radius},
            {"compactness", c.compactness}}},
          {"train", train_json(c.train)},
          {"ensemble",
           {{"num_seeds", c.num_seeds}, {"voting", to_string(c.voting)}, {"bins", c.calibration_bins}}},
          {"augment", c.augment},
          {"output_dir", c.output_dir},
          {"master_seed", c.master_seed}};
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown config key '" + where + key + "'");
    }
  }
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

PipelineConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    check_keys(j,
               {"sub_dataset", "counts", "raster", "graph_raster", "material", "solver", "graph",
                "train", "ensemble", "augment", "output_dir", "master_seed"},
               "");
    SubDataset kind = SubDataset::Sub1;
    if (j.contains("sub_dataset")) {
      const auto& v = j.at("sub_dataset");
      kind = parse_sub_dataset(v.is_string() ? v.get<std::string>() : std::to_string(v.get<int>()));
    }
    PipelineConfig c = PipelineConfig::defaults_for(kind);
    if (j.contains("counts")) {
      const auto& s = j.at("counts");
      check_keys(s, {"train", "val", "test"}, "counts.");
      take(s, "train", c.train_count);
      take(s, "val", c.val_count);
      take(s, "test", c.test_count);
    }
    if (j.contains("raster")) {
      check_keys(j.at("raster"), {"rows", "cols"}, "raster.");
      take(j.at("raster"), "rows", c.raster_rows);
      take(j.at("raster"), "cols", c.raster_cols);
    }
    if (j.contains("graph_raster")) {
      check_keys(j.at("graph_raster"), {"rows", "cols"}, "graph_raster.");
      take(j.at("graph_raster"), "rows", c.graph_rows);
      take(j.at("graph_raster"), "cols", c.graph_cols);
    }
    if (j.contains("material")) {
      check_keys(j.at("material"), {"E", "nu"}, "material.");
      take(j.at("material"), "E", c.youngs_modulus);
      take(j.at("material"), "nu", c.poisson_ratio);
    }
    if (j.contains("solver")) {
      const auto& s = j.at("solver");
      check_keys(s,
                 {"increment", "stop_ratio", "newton_rel_tol", "newton_max_iter", "max_step_halvings",
                  "max_compression"},
                 "solver.");
      take(s, "increment", c.solver.increment);
      take(s, "stop_ratio", c.solver.stop_ratio);
      take(s, "newton_rel_tol", c.solver.newton_rel_tol);
      take(s, "newton_max_iter", c.solver.newton_max_iter);
      take(s, "max_step_halvings", c.solver.max_step_halvings);
      take(s, "max_compression", c.solver.max_compression);
    }
    if (j.contains("graph")) {
      const auto& s = j.at("graph");
      check_keys(s, {"method", "density", "radius", "compactness"}, "graph.");
      if (s.contains("method")) c.method = parse_method(s.at("method").get<std::string>());
      if (s.contains("density")) c.density = parse_density(s.at("density").get<std::string>());
      take(s, "radius", c.radius);
      take(s, "compactness", c.compactness);
    }
    if (j.contains("train")) {
      const auto& s = j.at("train");
      check_keys(s, {"epochs", "lr", "beta1", "beta2", "eps", "batch_size", "shuffle", "bn_recalibration"},
                 "train.");
      take(s, "epochs", c.train.epochs);
      take(s, "lr", c.train.lr);
      take(s, "beta1", c.train.beta1);
      take(s, "beta2", c.train.beta2);
      take(s, "eps", c.train.eps);
      take(s, "batch_size", c.train.batch_size);
      take(s, "shuffle", c.train.shuffle);
      take(s, "bn_recalibration", c.train.bn_recalibration);
    }
    if (j.contains("ensemble")) {
      const auto& s = j.at("ensemble");
      check_keys(s, {"num_seeds", "voting", "bins"}, "ensemble.");
      take(s, "num_seeds", c.num_seeds);
      if (s.contains("voting")) c.voting = parse_voting(s.at("voting").get<std::string>());
      take(s, "bins", c.calibration_bins);
    }
    take(j, "augment", c.augment);
    take(j, "output_dir", c.output_dir);
    take(j, "master_seed", c.master_seed);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

std::string config_to_json(const PipelineConfig& cfg) { return to_json(cfg).dump(2); }

std::string stage_digest(const PipelineConfig& c, Stage stage) {
  const json full = to_json(c);
  json parts = json::array();
  parts.push_back({{"sub_dataset", full["sub_dataset"]},
                   {"counts", full["counts"]},
                   {"master_seed", full["master_seed"]}});
  if (stage >= Stage::Simulate) {
    parts.push_back({{"raster", full["raster"]}, {"material", full["material"]}, {"solver", full["solver"]}});
  }
  if (stage >= Stage::Graphify) {
    parts.push_back({{"graph_raster", full["graph_raster"]}, {"graph", full["graph"]}, {"augment", full["augment"]}});
  }
  if (stage >= Stage::Train) {
    parts.push_back({{"train", full["train"]}, {"num_seeds", full["ensemble"]["num_seeds"]}});
  }
  if (stage >= Stage::Ensemble) {
    parts.push_back({{"voting", full["ensemble"]["voting"]}, {"bins", full["ensemble"]["bins"]}});
  }
  return hex64(fnv1a(parts.dump()));
}

int worker_threads() {
  if (const char* env = std::getenv("BUCKLE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(std::min<long>(v, 256));
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  threads = std::clamp(threads, 1, n);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

struct Paths {
  fs::path root;
  fs::path stages() const { return root / "stages"; }
  fs::path specs() const { return root / "specs.jsonl"; }
  fs::path bitmaps() const { return root / "bitmaps"; }
  fs::path manifest() const { return root / "manifest.csv"; }
  fs::path simulations() const { return root / "simulations.jsonl"; }
  fs::path graphs() const { return root / "graphs"; }
  fs::path models() const { return root / "models"; }
  fs::path evaluation() const { return root / "evaluation.json"; }
  fs::path ensemble() const { return root / "ensemble.json"; }
  fs::path calibration() const { return root / "calibration.json"; }
};

void emit(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

std::string member_name(int m) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", m);
  return buf;
}

std::uint64_t member_seed(const PipelineConfig& c, int m) {
  return derive_key(c.master_seed, 0x5EED0000ULL + static_cast<std::uint64_t>(m));
}

void write_stage_record(const Paths& p, const PipelineConfig& c, Stage stage, json extra) {
  extra["stage"] = to_string(stage);
  extra["config_digest"] = stage_digest(c, stage);
  extra["master_seed"] = c.master_seed;
  fs::create_directories(p.stages());
  write_text_file(p.stages() / (to_string(stage) + ".json"), extra.dump(2) + "\n");
}

json require_stage(const Paths& p, const PipelineConfig& c, Stage upstream, Stage current) {
  const fs::path f = p.stages() / (to_string(upstream) + ".json");
  if (!fs::exists(f)) {
    throw UpstreamError("stage '" + to_string(current) + "' needs the output of '" + to_string(upstream) +
                        "' in " + p.root.string() + "; run `buckle " + to_string(upstream) + "` first");
  }
  json rec;
  try {
    rec = json::parse(read_text_file(f));
  } catch (const json::exception& e) {
    throw UpstreamError("unreadable stage record " + f.string() + ": " + e.what());
  }
  const std::string want = stage_digest(c, upstream);
  if (rec.value("config_digest", "") != want) {
    throw UpstreamError("artifacts of stage '" + to_string(upstream) + "' are stale (digest " +
                        rec.value("config_digest", "?") + ", config expects " + want + "); rerun `buckle " +
                        to_string(upstream) + "`");
  }
  return rec;
}

std::vector<ManifestRow> load_manifest(const Paths& p) {
  std::ifstream in(p.manifest());
  if (!in) throw UpstreamError("missing manifest " + p.manifest().string() + "; run `buckle generate`");
  return read_manifest(in);
}

void save_manifest(const Paths& p, const std::vector<ManifestRow>& rows) {
  std::ostringstream s;
  write_manifest(s, rows);
  write_text_file(p.manifest(), s.str());
}

std::vector<ColumnSpec> load_specs(const Paths& p) {
  std::ifstream in(p.specs());
  if (!in) throw UpstreamError("missing " + p.specs().string() + "; run `buckle generate`");
  std::vector<ColumnSpec> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(spec_from_json(line));
  }
  return out;
}

// ---------------------------------------------------------------- generate

void stage_generate(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  const int total = c.train_count + c.val_count + c.test_count;
  emit(log, "generate: " + std::to_string(total) + " " + to_string(c.sub_dataset) + " columns");
  std::vector<ColumnSpec> specs(static_cast<std::size_t>(total));
  std::vector<Bitmap> bitmaps(static_cast<std::size_t>(total));
  const auto [rows, cols] = c.fea_raster();
  parallel_for(total, worker_threads(), [&](int k) {
    specs[k] = gen_geometry(c.sub_dataset, derive_key(c.master_seed, static_cast<std::uint64_t>(k)));
    bitmaps[k] = rasterize(specs[k], rows, cols);
  });

  fs::create_directories(p.bitmaps());
  std::ostringstream spec_lines;
  std::vector<ManifestRow> manifest;
  for (int k = 0; k < total; ++k) {
    spec_lines << json::parse(spec_to_json(specs[k])).dump() << '\n';
    std::ostringstream pgm;
    write_pgm(pgm, bitmaps[k]);
    write_text_file(p.bitmaps() / (specs[k].id + ".pgm"), pgm.str());
    ManifestRow row;
    row.id = specs[k].id;
    row.kind = c.sub_dataset;
    row.seed = specs[k].seed;
    row.split = k < c.train_count ? Split::Train
                : k < c.train_count + c.val_count ? Split::Val
                                                  : Split::Test;
    manifest.push_back(row);
  }
  write_text_file(p.specs(), spec_lines.str());
  save_manifest(p, manifest);
  write_stage_record(p, c, Stage::Generate,
                     {{"count", total}, {"raster", {{"rows", rows}, {"cols", cols}}}});
}

// ---------------------------------------------------------------- simulate

void stage_simulate(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  require_stage(p, c, Stage::Generate, Stage::Simulate);
  auto manifest = load_manifest(p);
  const MaterialModel material = lame_parameters(c.youngs_modulus, c.poisson_ratio);
  const int n = static_cast<int>(manifest.size());
  emit(log, "simulate: " + std::to_string(n) + " columns on " + std::to_string(worker_threads()) + " threads");

  std::vector<std::string> diag(static_cast<std::size_t>(n));
  std::vector<std::optional<Label>> labels(static_cast<std::size_t>(n));
  std::atomic<int> done{0};
  std::mutex log_mu;
  parallel_for(n, worker_threads(), [&](int k) {
    const fs::path f = p.bitmaps() / (manifest[k].id + ".pgm");
    std::ifstream in(f, std::ios::binary);
    if (!in) throw UpstreamError("missing bitmap " + f.string() + "; run `buckle generate`");
    const Bitmap bm = read_pgm(in);
    const PixelMesh mesh = build_pixel_mesh(bm);
    json d;
    try {
      const SimResult r = solve_compression(mesh, material, c.solver);
      d = json::parse(sim_result_to_json(r, manifest[k].id));
      d["status"] = "labeled";
      labels[k] = r.label;
    } catch (const AmbiguousSampleError& e) {
      d = {{"id", manifest[k].id}, {"status", "ambiguous"}, {"reason", e.what()}};
    } catch (const SolverFailure& e) {
      d = {{"id", manifest[k].id}, {"status", "failed"}, {"reason", e.what()}};
    }
    diag[k] = d.dump();
    const int finished = ++done;
    if (log && (finished % 100 == 0 || finished == n)) {
      std::lock_guard<std::mutex> lock(log_mu);
      log("simulate: " + std::to_string(finished) + "/" + std::to_string(n));
    }
  });

  int labeled = 0, failed = 0, right = 0;
  std::ostringstream lines;
  for (int k = 0; k < n; ++k) {
    manifest[k].label = labels[k];
    if (labels[k]) {
      ++labeled;
      right += *labels[k];
    }
    if (json::parse(diag[k]).at("status") == "failed") ++failed;
    lines << diag[k] << '\n';
  }
  write_text_file(p.simulations(), lines.str());
  save_manifest(p, manifest);
  if (failed * 10 > n) {
    throw NumericalError("solver failed on " + std::to_string(failed) + " of " + std::to_string(n) + " columns");
  }
  emit(log, "simulate: " + std::to_string(labeled) + " labeled, " + std::to_string(right) + " buckle right");
  write_stage_record(p, c, Stage::Simulate,
                     {{"labeled", labeled},
                      {"ambiguous", n - labeled - failed},
                      {"failed", failed},
                      {"class1", right}});
}

// ---------------------------------------------------------------- graphify

ColumnSpec reflect_spec(ColumnSpec spec, ReflectionAxis axis) {
  const bool fx = axis == ReflectionAxis::X || axis == ReflectionAxis::Both;
  const bool fy = axis == ReflectionAxis::Y || axis == ReflectionAxis::Both;
  for (auto& prim : spec.primitives) {
    if (auto* r = std::get_if<Ring>(&prim.shape)) {
      if (fy) r->cx = spec.width - r->cx;
      if (fx) r->cy = spec.length - r->cy;
    } else {
      auto& b = std::get<Block>(prim.shape);
      if (fy) b.x0 = spec.width - b.x0 - b.width;
      if (fx) b.y0 = spec.length - b.y0 - b.height;
    }
  }
  return spec;
}

SpatialGraph make_graph(const PipelineConfig& c, const ColumnSpec& spec, std::optional<ReflectionAxis> axis) {
  SpatialGraph g;
  if (c.method == GraphMethod::Exact) {
    const ColumnSpec s = axis ? reflect_spec(spec, *axis) : spec;
    const auto [rows, cols] = c.fea_raster();
    Bitmap bm = rasterize(spec, rows, cols);
    if (axis) bm = reflect(bm, *axis, 0).first;
    g = build_exact(s, bm);
  } else {
    Bitmap bm = rasterize(spec, c.graph_rows, c.graph_cols);
    if (axis) bm = reflect(bm, *axis, 0).first;
    const SegmentationMap seg = slic_segment(bm, density_target(c.density), c.compactness);
    const SuperpixelNodes nodes = superpixel_features(seg, bm, spec.width);
    g = c.method == GraphMethod::Rag ? build_rag(seg, nodes)
                                     : build_ball_query(nodes.features, c.radius * spec.width);
  }
  g.method = c.method;
  g.density = c.density;
  g.radius = c.method == GraphMethod::Ball ? c.radius : 0.0;
  return g;
}

void stage_graphify(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  if (c.method == GraphMethod::Exact && c.sub_dataset == SubDataset::Sub3) {
    throw UnsupportedRepresentationError("method 'exact' is not available for sub-dataset 3");
  }
  require_stage(p, c, Stage::Simulate, Stage::Graphify);
  const auto manifest = load_manifest(p);
  const auto specs = load_specs(p);
  if (specs.size() != manifest.size()) throw UpstreamError("specs and manifest disagree; rerun `buckle generate`");

  struct Job {
    int row;
    std::optional<ReflectionAxis> axis;
    Label label;
    std::string suffix;
  };
  std::vector<Job> jobs;
  for (int k = 0; k < static_cast<int>(manifest.size()); ++k) {
    const auto& r = manifest[k];
    if (!r.label) continue;
    if (specs[k].id != r.id) throw UpstreamError("spec order differs from manifest; rerun `buckle generate`");
    jobs.push_back({k, std::nullopt, *r.label, ""});
    if (c.augment && r.split == Split::Train) {
      jobs.push_back({k, ReflectionAxis::X, *r.label, "+x"});
      jobs.push_back({k, ReflectionAxis::Y, 1 - *r.label, "+y"});
      jobs.push_back({k, ReflectionAxis::Both, 1 - *r.label, "+xy"});
    }
  }
  const int n = static_cast<int>(jobs.size());
  emit(log, "graphify: " + std::to_string(n) + " graphs (" + to_string(c.method) + ", " + to_string(c.density) + ")");
  std::vector<SpatialGraph> graphs(static_cast<std::size_t>(n));
  std::atomic<int> done{0};
  std::mutex log_mu;
  parallel_for(n, worker_threads(), [&](int k) {
    const Job& job = jobs[k];
    try {
      graphs[k] = make_graph(c, specs[job.row], job.axis);
    } catch (const EmptyStructureError&) {
      graphs[k] = SpatialGraph{};
    }
    graphs[k].id = manifest[job.row].id + job.suffix;
    graphs[k].label = job.label;
    const int finished = ++done;
    if (log && (finished % 500 == 0 || finished == n)) {
      std::lock_guard<std::mutex> lock(log_mu);
      log("graphify: " + std::to_string(finished) + "/" + std::to_string(n));
    }
  });

  std::array<std::vector<SpatialGraph>, 3> split_graphs;
  std::ostringstream gm;
  gm << "id,base_id,split,label,augmentation,nodes,edges\n";
  int skipped = 0;
  for (int k = 0; k < n; ++k) {
    const auto& row = manifest[jobs[k].row];
    if (graphs[k].node_count() == 0) {
      ++skipped;
      emit(log, "graphify: skipping " + graphs[k].id + " (no retained superpixels)");
      continue;
    }
    gm << graphs[k].id << ',' << row.id << ',' << to_string(row.split) << ',' << graphs[k].label << ','
       << (jobs[k].suffix.empty() ? "none" : jobs[k].suffix.substr(1)) << ',' << graphs[k].node_count() << ','
       << graphs[k].edges.size() - static_cast<std::size_t>(graphs[k].node_count()) << '\n';
    split_graphs[static_cast<int>(row.split)].push_back(std::move(graphs[k]));
  }
  if (split_graphs[0].empty()) throw UpstreamError("no labeled training structures; check `buckle simulate` output");

  NormalizedDataset train = normalize_features(std::move(split_graphs[0]));
  fs::create_directories(p.graphs());
  auto write_split = [&](const std::string& name, const std::vector<SpatialGraph>& gs) {
    std::ostringstream s;
    write_graphs_jsonl(s, gs);
    write_text_file(p.graphs() / (name + ".jsonl"), s.str());
  };
  write_split("train", train.graphs);
  for (int sp = 1; sp < 3; ++sp) {
    std::vector<SpatialGraph> gs;
    if (!split_graphs[sp].empty()) gs = normalize_features(std::move(split_graphs[sp]), train.stats).graphs;
    write_split(sp == 1 ? "val" : "test", gs);
  }
  for (const auto& w : train.warnings) emit(log, "graphify: warning: " + w);
  write_text_file(p.graphs() / "norm_stats.json", stats_to_json(train.stats) + "\n");
  write_text_file(p.graphs() / "graph_manifest.csv", gm.str());
  write_stage_record(p, c, Stage::Graphify,
                     {{"graphs", n - skipped}, {"skipped", skipped}, {"warnings", train.warnings}});
}

// ---------------------------------------------------------------- train

std::vector<GraphTensor> load_tensors(const Paths& p, const std::string& split) {
  const fs::path f = p.graphs() / (split + ".jsonl");
  std::ifstream in(f);
  if (!in) throw UpstreamError("missing " + f.string() + "; run `buckle graphify`");
  std::vector<GraphTensor> out;
  for (const auto& g : read_graphs_jsonl(in)) out.push_back(to_tensor(g));
  return out;
}

std::vector<std::string> load_ids(const Paths& p, const std::string& split) {
  std::ifstream in(p.graphs() / (split + ".jsonl"));
  std::vector<std::string> ids;
  for (const auto& g : read_graphs_jsonl(in)) ids.push_back(g.id);
  return ids;
}

void stage_train(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  require_stage(p, c, Stage::Graphify, Stage::Train);
  const auto train_set = load_tensors(p, "train");
  const auto val_set = load_tensors(p, "val");
  emit(log, "train: " + std::to_string(c.num_seeds) + " models on " + std::to_string(train_set.size()) +
                " graphs, " + std::to_string(c.train.epochs) + " epochs");
  fs::create_directories(p.models());
  std::mutex log_mu;
  std::vector<double> final_val(static_cast<std::size_t>(c.num_seeds));
  parallel_for(c.num_seeds, worker_threads(), [&](int m) {
    TrainConfig tc = c.train;
    tc.seed = member_seed(c, m);
    TrainResult r = train(train_set, val_set, tc, [&](const EpochRecord& e) {
      if (!log) return;
      char buf[128];
      std::snprintf(buf, sizeof buf, "train: model %02d epoch %3d loss %.5f val_acc %.4f", m, e.epoch,
                    e.train_loss, e.val_acc);
      std::lock_guard<std::mutex> lock(log_mu);
      log(buf);
    });
    const json meta = {{"config_digest", stage_digest(c, Stage::Train)},
                       {"master_seed", c.master_seed},
                       {"member", m},
                       {"seed", tc.seed},
                       {"train", train_json(tc)}};
    std::ostringstream blob;
    write_model_blob(blob, r.params, meta.dump());
    write_text_file(p.models() / ("model_" + member_name(m) + ".bin"), blob.str());
    std::ostringstream hist;
    write_history_csv(hist, r.history);
    write_text_file(p.models() / ("history_" + member_name(m) + ".csv"), hist.str());
    final_val[m] = r.history.back().val_acc;
  });
  write_stage_record(p, c, Stage::Train, {{"num_seeds", c.num_seeds}, {"final_val_acc", final_val}});
}

// ---------------------------------------------------------------- evaluate

std::vector<ModelParams> load_models(const Paths& p, const PipelineConfig& c) {
  std::vector<ModelParams> models;
  for (int m = 0; m < c.num_seeds; ++m) {
    const fs::path f = p.models() / ("model_" + member_name(m) + ".bin");
    std::ifstream in(f, std::ios::binary);
    if (!in) throw UpstreamError("missing model " + f.string() + "; run `buckle train`");
    auto [params, meta] = read_model_blob(in);
    if (json::parse(meta).value("config_digest", "") != stage_digest(c, Stage::Train)) {
      throw UpstreamError("model " + f.string() + " is stale; rerun `buckle train`");
    }
    models.push_back(std::move(params));
  }
  return models;
}

void stage_evaluate(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  require_stage(p, c, Stage::Train, Stage::Evaluate);
  const auto models = load_models(p, c);
  const auto test_set = load_tensors(p, "test");
  const auto ids = load_ids(p, "test");
  if (test_set.empty()) throw UpstreamError("test split is empty; check `buckle graphify` output");
  std::vector<Evaluation> evals(models.size());
  parallel_for(static_cast<int>(models.size()), worker_threads(),
               [&](int m) { evals[m] = evaluate(models[m], test_set); });
  json members = json::array();
  for (std::size_t m = 0; m < models.size(); ++m) {
    json probs = json::array();
    for (const auto& pr : evals[m].predictions) probs.push_back({pr.probs[0], pr.probs[1]});
    members.push_back({{"member", m},
                       {"seed", models[m].seed},
                       {"accuracy", evals[m].accuracy},
                       {"probs", std::move(probs)}});
    char buf[64];
    std::snprintf(buf, sizeof buf, "evaluate: model %02zu accuracy %.4f", m, evals[m].accuracy);
    emit(log, buf);
  }
  json labels = json::array();
  for (const auto& t : test_set) labels.push_back(t.label);
  const json out = {{"config_digest", stage_digest(c, Stage::Evaluate)},
                    {"master_seed", c.master_seed},
                    {"ids", ids},
                    {"labels", labels},
                    {"models", members}};
  write_text_file(p.evaluation(), out.dump(1) + "\n");
  write_stage_record(p, c, Stage::Evaluate, {{"samples", test_set.size()}});
}

struct EvaluationFile {
  std::vector<Label> labels;
  std::vector<std::vector<Eigen::Vector2d>> probs;
  std::vector<double> accuracy;
};

EvaluationFile load_evaluation(const Paths& p) {
  if (!fs::exists(p.evaluation())) throw UpstreamError("missing evaluation.json; run `buckle evaluate`");
  const json j = json::parse(read_text_file(p.evaluation()));
  EvaluationFile e;
  e.labels = j.at("labels").get<std::vector<Label>>();
  for (const auto& m : j.at("models")) {
    std::vector<Eigen::Vector2d> rows;
    for (const auto& pr : m.at("probs")) rows.emplace_back(pr[0].get<double>(), pr[1].get<double>());
    e.probs.push_back(std::move(rows));
    e.accuracy.push_back(m.at("accuracy").get<double>());
  }
  return e;
}

// ---------------------------------------------------------------- ensemble / calibrate

void stage_ensemble(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  require_stage(p, c, Stage::Evaluate, Stage::Ensemble);
  const EvaluationFile e = load_evaluation(p);
  const EnsembleReport rep = ensemble_report(e.probs, e.labels, c.calibration_bins);
  json out = {{"config_digest", stage_digest(c, Stage::Ensemble)},
              {"master_seed", c.master_seed},
              {"voting", to_string(c.voting)},
              {"member_accuracy", rep.member_accuracy},
              {"mean_accuracy", rep.mean_accuracy},
              {"best_accuracy", rep.best_accuracy},
              {"ece", rep.ece},
              {"mce", rep.mce}};
  if (c.voting != Voting::Soft) out["hard_vote_accuracy"] = rep.hard_vote_accuracy;
  if (c.voting != Voting::Hard) out["soft_vote_accuracy"] = rep.soft_vote_accuracy;
  write_text_file(p.ensemble(), out.dump(2) + "\n");
  char buf[160];
  std::snprintf(buf, sizeof buf, "ensemble: mean %.4f best %.4f hard %.4f soft %.4f", rep.mean_accuracy,
                rep.best_accuracy, rep.hard_vote_accuracy, rep.soft_vote_accuracy);
  emit(log, buf);
  write_stage_record(p, c, Stage::Ensemble, {});
}

void stage_calibrate(const PipelineConfig& c, const Paths& p, const LogFn& log) {
  require_stage(p, c, Stage::Ensemble, Stage::Calibrate);
  const EvaluationFile e = load_evaluation(p);
  const std::size_t N = e.labels.size();
  std::vector<double> conf(N);
  for (std::size_t s = 0; s < N; ++s) {
    Eigen::MatrixX2d rows(static_cast<Eigen::Index>(e.probs.size()), 2);
    for (std::size_t m = 0; m < e.probs.size(); ++m) rows.row(static_cast<Eigen::Index>(m)) = e.probs[m][s].transpose();
    conf[s] = std::clamp(soft_vote(rows).first[1], 0.0, 1.0);
  }
  const CalibrationReport rep = calibration_report(conf, e.labels, c.calibration_bins);
  std::ostringstream csv;
  write_reliability_csv(csv, rep.diagram);
  write_text_file(p.root / "reliability.csv", csv.str());
  write_text_file(p.root / "reliability.svg", reliability_svg(rep.diagram, "soft-vote ensemble"));
  json members = json::array();
  for (const auto& m : e.probs) {
    std::vector<double> pm(N);
    for (std::size_t s = 0; s < N; ++s) pm[s] = std::clamp(m[s][1], 0.0, 1.0);
    const CalibrationReport r = calibration_report(pm, e.labels, c.calibration_bins);
    members.push_back({{"ece", r.ece}, {"mce", r.mce}});
  }
  const json out = {{"config_digest", stage_digest(c, Stage::Calibrate)},
                    {"master_seed", c.master_seed},
                    {"bins", c.calibration_bins},
                    {"ece", rep.ece},
                    {"mce", rep.mce},
                    {"members", members}};
  write_text_file(p.calibration(), out.dump(2) + "\n");
  char buf[96];
  std::snprintf(buf, sizeof buf, "calibrate: ECE %.4f MCE %.4f", rep.ece, rep.mce);
  emit(log, buf);
  write_stage_record(p, c, Stage::Calibrate, {});
}

}  // namespace

void run_stage(Stage stage, const PipelineConfig& cfg, const LogFn& log) {
  cfg.validate();
  const Paths p{fs::path(cfg.output_dir)};
  fs::create_directories(p.root);
  write_text_file(p.root / "config.json", config_to_json(cfg) + "\n");
  switch (stage) {
    case Stage::Generate: stage_generate(cfg, p, log); break;
    case Stage::Simulate: stage_simulate(cfg, p, log); break;
    case Stage::Graphify: stage_graphify(cfg, p, log); break;
    case Stage::Train: stage_train(cfg, p, log); break;
    case Stage::Evaluate: stage_evaluate(cfg, p, log); break;
    case Stage::Ensemble: stage_ensemble(cfg, p, log); break;
    case Stage::Calibrate: stage_calibrate(cfg, p, log); break;
    case Stage::Pipeline:
      for (int s = 0; s < static_cast<int>(Stage::Pipeline); ++s) run_stage(static_cast<Stage>(s), cfg, log);
      break;
  }
}

}  // namespace buckle
