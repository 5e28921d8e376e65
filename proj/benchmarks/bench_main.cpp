#include <benchmark/benchmark.h>

#include <map>

#include "buckle/fea.hpp"
#include "buckle/geometry.hpp"
#include "buckle/gnn.hpp"
#include "buckle/graph.hpp"

namespace {

using namespace buckle;

const Bitmap& sub1_bitmap(int rows, int cols) {
  static std::map<std::pair<int, int>, Bitmap> cache;
  auto& b = cache[{rows, cols}];
  if (b.rows == 0) b = rasterize(gen_geometry(SubDataset::Sub1, 11), rows, cols);
  return b;
}

void BM_Rasterize(benchmark::State& state) {
  const ColumnSpec spec = gen_geometry(SubDataset::Sub2, 5);
  for (auto _ : state) benchmark::DoNotOptimize(rasterize(spec, 800, 100));
}
BENCHMARK(BM_Rasterize)->Unit(benchmark::kMillisecond);

void BM_TangentAssembly(benchmark::State& state) {
  const PixelMesh mesh = build_pixel_mesh(sub1_bitmap(160, 20));
  const HyperelasticAssembler asmb(mesh, lame_parameters(1.0, 0.3));
  Eigen::VectorXd u = Eigen::VectorXd::Zero(mesh.dof_count());
  for (int k = 0; k < u.size(); k += 2) u[k] = 1e-3 * mesh.nodes[k / 2].y();
  for (auto _ : state) benchmark::DoNotOptimize(asmb.tangent(u));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(mesh.elements.size()));
}
BENCHMARK(BM_TangentAssembly)->Unit(benchmark::kMillisecond);

void BM_SolveCompression(benchmark::State& state) {
  const PixelMesh mesh = build_pixel_mesh(sub1_bitmap(160, 20));
  const MaterialModel mat = lame_parameters(1.0, 0.3);
  for (auto _ : state) {
    try {
      benchmark::DoNotOptimize(solve_compression(mesh, mat));
    } catch (const AmbiguousSampleError&) {
    }
  }
}
BENCHMARK(BM_SolveCompression)->Unit(benchmark::kMillisecond)->Iterations(1);

void BM_Slic(benchmark::State& state) {
  const Bitmap& bm = sub1_bitmap(800, 100);
  for (auto _ : state) benchmark::DoNotOptimize(slic_segment(bm, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_Slic)->Arg(150)->Arg(300)->Arg(600)->Unit(benchmark::kMillisecond);

GraphTensor sample_tensor() {
  const Bitmap& bm = sub1_bitmap(800, 100);
  const auto seg = slic_segment(bm, 300);
  const auto nodes = superpixel_features(seg, bm);
  auto g = build_ball_query(nodes.features, 0.4);
  g.label = 1;
  return to_tensor(normalize_features({g}).graphs[0]);
}

void BM_GnnForward(benchmark::State& state) {
  const GraphTensor t = sample_tensor();
  const ModelParams p = init_model(1);
  for (auto _ : state) benchmark::DoNotOptimize(model_forward(t, p, Mode::Eval));
  state.counters["nodes"] = t.node_count();
  state.counters["edges"] = static_cast<double>(t.neighbors.size());
}
BENCHMARK(BM_GnnForward)->Unit(benchmark::kMillisecond);

void BM_GnnLossAndGradients(benchmark::State& state) {
  const GraphTensor t = sample_tensor();
  std::vector<const GraphTensor*> batch(32, &t);
  const ModelParams p = init_model(1);
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_gradients(batch, p));
}
BENCHMARK(BM_GnnLossAndGradients)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
