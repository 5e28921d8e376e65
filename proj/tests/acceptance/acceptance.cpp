// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "buckle/ensemble.hpp"
#include "buckle/error.hpp"
#include "buckle/fea.hpp"
#include "buckle/geometry.hpp"
#include "buckle/geometry_io.hpp"
#include "buckle/gnn.hpp"
#include "buckle/graph.hpp"
#include "buckle/pipeline.hpp"
#include "buckle/rng.hpp"
#include "gnn_reference.hpp"

namespace fs = std::filesystem;
using namespace buckle;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome energy_sanity() {
  const MaterialModel m = lame_parameters(1.0, 0.3);
  const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
  const double psi0 = strain_energy_density(I, m);
  const double p0 = first_piola(I, m).cwiseAbs().maxCoeff();

  Eigen::Matrix3d F = I;
  F(1, 1) = 0.9;
  // Closed form in long double: F:F = 2.81, J = 0.9.
  const long double lambda = 0.3L / (1.3L * 0.4L), mu = 1.0L / 2.6L;
  const long double J = 0.9L, lnJ = std::log(J);
  const long double oracle = mu / 2 * (2.81L - 3 - 2 * lnJ) + lambda / 2 * ((J * J - 1) / 2 - lnJ);
  const double psi = strain_energy_density(F, m);
  const double err = std::abs(psi - static_cast<double>(oracle));
  return {std::abs(psi0) <= 1e-12 && p0 <= 1e-12 && err <= 1e-12,
          fmt("psi(I) = %.1e, max|P(I)| = %.1e, psi(diag(1,0.9,1)) = %.15f (|err| %.1e)", psi0, p0, psi, err)};
}

// ---------------------------------------------------------------- 2

Outcome fea_gradients() {
  const PixelMesh mesh = build_pixel_mesh(Bitmap(128, 16, 1));
  const MaterialModel m = lame_parameters(1.0, 0.3);
  const HyperelasticAssembler asmb(mesh, m);
  const int ndof = mesh.dof_count();
  double worst_rel = 0.0, worst_sym = 0.0;
  const double h = 1e-6;
  for (int s = 0; s < 20; ++s) {
    CounterRng rng(derive_key(0xFEA, static_cast<std::uint64_t>(s)));
    // Admissible state: smooth compression plus a small random perturbation.
    Eigen::VectorXd u(ndof);
    const double squeeze = rng.uniform(0.0, 0.05);
    for (int n = 0; n < ndof / 2; ++n) {
      const auto& X = mesh.nodes[n];
      u[2 * n] = 0.02 * std::sin(std::numbers::pi * X.y() / mesh.length) + rng.uniform(-1e-3, 1e-3);
      u[2 * n + 1] = -squeeze * X.y() + rng.uniform(-1e-3, 1e-3);
    }
    const Eigen::VectorXd f = asmb.internal_force(u);
    // Local energies make each central difference O(1) instead of O(mesh).
    Eigen::VectorXd fd(ndof);
    for (int d = 0; d < ndof; ++d) {
      const int node = d / 2;
      Eigen::VectorXd up = u, um = u;
      up[d] += h;
      um[d] -= h;
      fd[d] = (asmb.local_energy(up, node) - asmb.local_energy(um, node)) / (2 * h);
    }
    worst_rel = std::max(worst_rel, (fd - f).norm() / f.norm());
    const Eigen::SparseMatrix<double> K = asmb.tangent(u);
    const Eigen::SparseMatrix<double> Kt = K.transpose();
    const Eigen::SparseMatrix<double> D = K - Kt;
    const double asym = D.nonZeros() ? D.coeffs().cwiseAbs().maxCoeff() : 0.0;
    worst_sym = std::max(worst_sym, asym / K.coeffs().cwiseAbs().maxCoeff());
  }
  return {worst_rel < 1e-6 && worst_sym < 1e-10,
          fmt("16x128 mesh, 20 states: residual vs energy FD rel. error %.2e, tangent asymmetry %.2e",
              worst_rel, worst_sym)};
}

// ---------------------------------------------------------------- 3

Outcome euler_oracle() {
  const PixelMesh mesh = build_pixel_mesh(Bitmap(128, 16, 1));
  SolverConfig cfg;
  cfg.stop_at_instability = true;
  const SimResult r = solve_compression(mesh, lame_parameters(1.0, 0.3), cfg);
  const double analytic = std::numbers::pi * std::numbers::pi / (3.0 * 64.0);
  if (!r.critical_strain) return {false, "no loss of stability detected before the compression cap"};
  const double rel = std::abs(*r.critical_strain - analytic) / analytic;
  return {rel <= 0.2, fmt("onset strain %.5f vs pi^2 w^2 / (3 L^2) = %.5f (%.1f%% off)", *r.critical_strain,
                          analytic, 100.0 * rel)};
}

// ---------------------------------------------------------------- 4

Outcome mirror_flip() {
  const MaterialModel m = lame_parameters(1.0, 0.3);
  int agree = 0, tested = 0, skipped = 0;
  std::vector<std::string> bad;
  for (std::uint64_t k = 0; tested < 50 && k < 200; ++k) {
    const ColumnSpec spec = gen_geometry(SubDataset::Sub1, derive_key(0x4D1, k));
    const Bitmap b = rasterize(spec, 160, 20);
    Label a;
    try {
      a = solve_compression(build_pixel_mesh(b), m).label;
    } catch (const AmbiguousSampleError&) {
      ++skipped;
      continue;
    }
    ++tested;
    const auto [mb, flipped] = reflect(b, ReflectionAxis::Y, a);
    try {
      const Label lm = solve_compression(build_pixel_mesh(mb), m).label;
      if (lm == flipped) {
        ++agree;
      } else {
        bad.push_back(spec.id);
      }
    } catch (const Error& e) {
      bad.push_back(spec.id + " (" + e.what() + ")");
    }
  }
  std::string detail = fmt("%d/%d mirrored columns flip their label", agree, tested);
  if (skipped) detail += fmt(" (%d unlabeled originals skipped)", skipped);
  if (!bad.empty()) detail += "; first mismatch " + bad.front();
  return {tested == 50 && agree == 50, detail};
}

// ---------------------------------------------------------------- 5

bool is_partition(const SegmentationMap& seg) {
  std::vector<int> seen(static_cast<std::size_t>(seg.count), 0);
  for (int l : seg.labels) {
    if (l < 0 || l >= seg.count) return false;
    seen[l] = 1;
  }
  return std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; });
}

Outcome graph_oracle() {
  int ball_ok = 0, mono_ok = 0, slic_ok = 0, slic_total = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    CounterRng rng(derive_key(0xBA11, s));
    const int n = static_cast<int>(rng.uniform_int(1, 400));
    std::vector<NodeFeature> pts(n);
    for (auto& p : pts) {
      p.x = rng.uniform(0.0, 1.0);
      p.y = rng.uniform(0.0, 8.0);
    }
    const double r = rng.uniform(0.02, 1.0);
    const SpatialGraph g = build_ball_query(pts, r);
    std::vector<std::pair<int, int>> brute;
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        const double dx = pts[j].x - pts[i].x, dy = pts[j].y - pts[i].y;
        if (dx * dx + dy * dy <= r * r) brute.emplace_back(i, j);
      }
    ball_ok += g.edges == brute;

    const SpatialGraph bigger = build_ball_query(pts, r * rng.uniform(1.0, 2.0));
    mono_ok += std::includes(bigger.edges.begin(), bigger.edges.end(), g.edges.begin(), g.edges.end());
  }
  for (auto kind : {SubDataset::Sub1, SubDataset::Sub2, SubDataset::Sub3}) {
    for (std::uint64_t s = 0; s < 4; ++s) {
      const Bitmap b = rasterize(gen_geometry(kind, derive_key(0x511C, s)), 800, 100);
      for (Density d : {Density::Sparse, Density::Medium, Density::Dense}) {
        ++slic_total;
        slic_ok += is_partition(slic_segment(b, density_target(d)));
      }
    }
  }
  return {ball_ok == 100 && mono_ok == 100 && slic_ok == slic_total,
          fmt("ball query = brute force %d/100, radius monotone %d/100, SLIC partitions %d/%d", ball_ok, mono_ok,
              slic_ok, slic_total)};
}

// ---------------------------------------------------------------- 6

Outcome gnn_gradients() {
  const ModelParams p = init_model(derive_key(0x6AD, 0));
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 4; ++k) graphs.push_back(testing::random_graph(5 + k, 0.4, derive_key(0x6AD, 1 + k)));
  std::vector<GraphTensor> t;
  for (const auto& g : graphs) t.push_back(to_tensor(g));
  std::vector<const GraphTensor*> ptrs;
  for (const auto& g : t) ptrs.push_back(&g);
  const auto checks = testing::finite_difference_check(ptrs, p, 1e-5, 1);
  double worst = 0.0;
  int checked = 0, skipped = 0, failing = 0;
  std::string worst_group;
  for (const auto& [name, gc] : checks) {
    if (gc.worst > worst) {
      worst = gc.worst;
      worst_group = name;
    }
    checked += gc.checked;
    skipped += gc.skipped;
    failing += gc.worst >= 1e-4 || gc.checked == 0;
  }
  return {failing == 0, fmt("%zu groups, %d coordinates, worst rel. error %.2e (%s); %d coordinates "
                            "straddling a max/Leaky-ReLU switch excluded",
                            checks.size(), checked, worst, worst_group.c_str(), skipped)};
}

// ---------------------------------------------------------------- 7

Outcome permutation_invariance() {
  const ModelParams p = init_model(derive_key(0x7E4, 0));
  double worst = 0.0;
  int graphs = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Bitmap b = rasterize(gen_geometry(SubDataset::Sub1, derive_key(0x7E4, 1 + s)), 800, 100);
    const SegmentationMap seg = slic_segment(b, 150);
    SpatialGraph g = build_ball_query(superpixel_features(seg, b).features, 0.4);
    g = normalize_features({g}).graphs[0];
    const Prediction ref = model_forward(g, p, Mode::Eval);
    for (std::uint64_t q = 0; q < 20; ++q) {
      const auto perm = testing::random_permutation(g.node_count(), derive_key(s, q));
      const Prediction pr = model_forward(testing::permute_graph(g, perm), p, Mode::Eval);
      worst = std::max({worst, std::abs(pr.logits[0] - ref.logits[0]), std::abs(pr.logits[1] - ref.logits[1])});
    }
    ++graphs;
  }
  return {worst <= 1e-9, fmt("%d graphs x 20 relabelings, max |logit difference| %.2e", graphs, worst)};
}

// ---------------------------------------------------------------- 8

PipelineConfig learning_config(const fs::path& out) {
  PipelineConfig c = PipelineConfig::defaults_for(SubDataset::Sub1);
  c.train_count = 2000;
  c.val_count = 250;
  c.test_count = 250;
  c.augment = true;
  c.num_seeds = 1;
  c.train.epochs = 50;
  c.master_seed = 20240601;
  c.output_dir = out.string();
  return c;
}

Outcome learning(const fs::path& work) {
  const fs::path out = work / "learning";
  const PipelineConfig c = learning_config(out);
  // A finished run whose evaluate record matches this config is reused.
  const fs::path rec = out / "stages" / "evaluate.json";
  bool fresh = false;
  if (fs::exists(rec)) {
    fresh = nlohmann::json::parse(read_text_file(rec)).value("config_digest", "") == stage_digest(c, Stage::Evaluate);
  }
  if (!fresh) fs::remove_all(out);
  for (Stage s : {Stage::Generate, Stage::Simulate, Stage::Graphify, Stage::Train, Stage::Evaluate}) {
    if (fresh) break;
    run_stage(s, c, [](const std::string& m) { std::fprintf(stderr, "  [8] %s\n", m.c_str()); });
  }
  const auto eval = nlohmann::json::parse(read_text_file(out / "evaluation.json"));
  const double acc = eval.at("models").at(0).at("accuracy").get<double>();
  const std::string train = read_text_file(out / "graphs" / "train.jsonl");
  const long graphs = std::count(train.begin(), train.end(), '\n');
  return {acc >= 0.75, fmt("held-out accuracy %.4f on %zu test columns (target >= 0.75), %ld training graphs",
                           acc, eval.at("labels").size(), graphs)};
}

// ---------------------------------------------------------------- 9

Outcome ensemble_fixtures() {
  std::vector<std::string> fails;
  const std::vector<Label> six = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  const std::vector<Label> tie = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  const std::vector<Label> one = {1};
  if (hard_vote(six) != 1 || hard_vote(tie) != 0 || hard_vote(one) != 1) fails.push_back("hard vote");
  Eigen::MatrixX2d rows(2, 2);
  rows << 0.4, 0.6, 0.8, 0.2;
  const auto [mean, label] = soft_vote(rows);
  if (std::abs(mean[0] - 0.6) > 1e-12 || std::abs(mean[1] - 0.4) > 1e-12 || label != 0) fails.push_back("soft vote");

  const std::vector<double> p = {0.55, 0.55, 0.95, 0.95};
  const std::vector<Label> y = {1, 0, 1, 1};
  const CalibrationReport r = calibration_report(p, y, 10);
  if (std::abs(r.ece - 0.05) > 1e-12 || std::abs(r.mce - 0.05) > 1e-12) fails.push_back("ECE/MCE fixture");
  const std::vector<double> sure = {0.0, 1.0};
  const std::vector<Label> right = {0, 1};
  const CalibrationReport z = calibration_report(sure, right, 10);
  if (z.ece != 0.0 || z.mce != 0.0) fails.push_back("perfect calibration");

  int ordered = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    CounterRng rng(derive_key(0xECE, s));
    const int n = static_cast<int>(rng.uniform_int(1, 300));
    std::vector<double> q(n);
    std::vector<Label> l(n);
    for (int k = 0; k < n; ++k) {
      q[k] = rng.uniform();
      l[k] = rng.uniform() < 0.5 ? 1 : 0;
    }
    const CalibrationReport c = calibration_report(q, l, static_cast<int>(rng.uniform_int(2, 20)));
    ordered += c.ece <= c.mce;
  }
  if (ordered != 1000) fails.push_back("ECE <= MCE");
  std::string detail = fmt("voting and calibration fixtures exact to 1e-12; ECE <= MCE on %d/1000 random sets",
                           ordered);
  if (!fails.empty()) detail = "failed: " + fails.front() + "; " + detail;
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------- 10

Outcome determinism(const fs::path& work) {
  PipelineConfig c = PipelineConfig::defaults_for(SubDataset::Sub1);
  c.train_count = 60;
  c.val_count = 10;
  c.test_count = 20;
  c.augment = true;
  c.num_seeds = 2;
  c.train.epochs = 3;
  c.master_seed = 99;
  std::vector<fs::path> dirs = {work / "determinism_a", work / "determinism_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    c.output_dir = d.string();
    run_stage(Stage::Pipeline, c);
  }
  int compared = 0;
  std::vector<std::string> differ;
  for (const fs::path rel : {"manifest.csv", "specs.jsonl", "graphs/train.jsonl", "graphs/val.jsonl",
                             "graphs/test.jsonl", "graphs/norm_stats.json", "models/model_00.bin",
                             "models/model_01.bin", "evaluation.json"}) {
    ++compared;
    if (read_text_file(dirs[0] / rel) != read_text_file(dirs[1] / rel)) differ.push_back(rel.string());
  }
  int bitmaps = 0;
  for (const auto& e : fs::directory_iterator(dirs[0] / "bitmaps")) {
    ++bitmaps;
    if (read_text_file(e.path()) != read_text_file(dirs[1] / "bitmaps" / e.path().filename())) {
      differ.push_back("bitmaps/" + e.path().filename().string());
    }
  }
  std::string detail = fmt("two 90-column pipeline runs: %d artifacts and %d bitmaps byte-identical", compared,
                           bitmaps);
  if (!differ.empty()) detail = "differs: " + differ.front();
  return {differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory for pipeline runs");
  app.add_option("--only", only, "run only these criteria (1-10)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"energy/stress sanity", energy_sanity},
      {"FEA gradient and tangent", fea_gradients},
      {"Euler buckling oracle", euler_oracle},
      {"mirror-label flip", mirror_flip},
      {"graph oracle", graph_oracle},
      {"GNN gradients", gnn_gradients},
      {"permutation invariance", permutation_invariance},
      {"learning", [&] { return learning(work); }},
      {"ensemble fixtures", ensemble_fixtures},
      {"pipeline determinism", [&] { return determinism(work); }},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
