#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "buckle/error.hpp"
#include "buckle/gnn.hpp"
#include "buckle/gnn_io.hpp"
#include "gnn_reference.hpp"

using namespace buckle;
using namespace buckle::testing;

namespace {

// All-zero weights with unit BatchNorm scale and running variance.
ModelParams blank_model() {
  ModelParams p = zeros_like(init_model(0));
  for (auto& l : p.layers) {
    l.gamma.setOnes();
    l.running_var.setOnes();
  }
  return p;
}

std::vector<GraphTensor> tensors_of(const std::vector<SpatialGraph>& graphs) {
  std::vector<GraphTensor> out;
  for (const auto& g : graphs) out.push_back(to_tensor(g));
  return out;
}

std::vector<const GraphTensor*> pointers(const std::vector<GraphTensor>& t) {
  std::vector<const GraphTensor*> out;
  for (const auto& g : t) out.push_back(&g);
  return out;
}

bool same_bits(const ModelParams& a, const ModelParams& b) {
  ModelParams x = a, y = b;
  std::vector<std::vector<double>> xs, ys;
  for_each_trainable(x, [&](const std::string&, double* d, Eigen::Index n) { xs.emplace_back(d, d + n); });
  for_each_trainable(y, [&](const std::string&, double* d, Eigen::Index n) { ys.emplace_back(d, d + n); });
  if (xs.size() != ys.size()) return false;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (xs[k].size() != ys[k].size()) return false;
    if (std::memcmp(xs[k].data(), ys[k].data(), xs[k].size() * sizeof(double)) != 0) return false;
  }
  for (int l = 0; l < kLayers; ++l) {
    if (a.layers[l].running_mean != b.layers[l].running_mean) return false;
    if (a.layers[l].running_var != b.layers[l].running_var) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("initialization shapes and counts") {
  const ModelParams p = init_model(3);
  CHECK(p.layers[0].w1.rows() == kNodeFeatures + kEdgeFeatures);
  CHECK(p.layers[1].w1.rows() == kEmbed + kEdgeFeatures);
  CHECK(p.classifier.rows() == kReadout);
  CHECK(p.trainable_count() == 6u * 64 + 64 + 64 * 64 + 64 + 128 + 3u * (66 * 64 + 64 + 64 * 64 + 64 + 128) + 512 + 2);
  const double bound = 1.0 / std::sqrt(6.0);
  CHECK(p.layers[0].w1.cwiseAbs().maxCoeff() <= bound);
  CHECK(p.layers[0].b1.isZero());
  CHECK(same_bits(init_model(3), p));
  CHECK_FALSE(same_bits(init_model(4), p));
}

TEST_CASE("single-node fixture") {
  ModelParams p = blank_model();
  p.layers[0].w1(0, 0) = 1.0;  // hidden 0 reads x
  p.layers[0].w2(0, 0) = 2.0;
  p.layers[0].b2[0] = 0.5;
  p.classifier(0, 1) = 1.0;
  SpatialGraph g;
  g.nodes = {{0.3, 4.0, 0.7, 0.2}};
  g.edges = {{0, 0}};
  const Prediction pr = model_forward(g, p, Mode::Eval);
  // Message 2 * 0.3 + 0.5, scaled by the running variance 1 + eps.
  const double v = 1.1 / std::sqrt(1.0 + 1e-5);
  CHECK(pr.logits[0] == doctest::Approx(0.0));
  CHECK(pr.logits[1] == doctest::Approx(v).epsilon(1e-14));
  CHECK(pr.probs[1] == doctest::Approx(1.0 / (1.0 + std::exp(-v))).epsilon(1e-14));
  CHECK(pr.predicted == 1);
  // In train mode a single node equals its batch mean, so BatchNorm yields beta.
  g.label = 0;
  const GraphTensor t = to_tensor(g);
  const GraphTensor* ptr = &t;
  CHECK(batch_loss(std::span(&ptr, 1), p) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("two-node fixture") {
  ModelParams p = blank_model();
  // Rows 4 and 5 of the first layer read the relative position.
  p.layers[0].w1(4, 0) = 1.0;
  p.layers[0].w1(4, 1) = -1.0;
  p.layers[0].w2(0, 0) = 1.0;
  p.layers[0].w2(1, 1) = 1.0;
  p.classifier(0, 0) = 1.0;
  p.classifier(1, 1) = 2.0;
  SpatialGraph g;
  g.nodes = {{0.0, 0.0, 0.0, 0.0}, {1.0, 2.0, 0.0, 0.0}};
  g.edges = {{0, 0}, {0, 1}, {1, 1}};
  // Node 0 sees B at +1: hidden (1, -0.01) so messages max to (1, 0).
  // Node 1 sees A at -1: hidden (-0.01, 1) so messages max to (0, 1).
  const double s = std::sqrt(1.0 + 1e-5);
  const Prediction pr = model_forward(g, p, Mode::Eval);
  CHECK(pr.logits[0] == doctest::Approx(1.0 / s).epsilon(1e-14));
  CHECK(pr.logits[1] == doctest::Approx(2.0 / s).epsilon(1e-14));

  const Matrix h0 = pointnet_layer_forward(to_tensor(g), to_tensor(g).features, p.layers[0], Mode::Eval);
  CHECK(h0(0, 0) == doctest::Approx(1.0 / s));
  CHECK(h0(0, 1) == doctest::Approx(0.0));
  CHECK(h0(1, 0) == doctest::Approx(0.0));
  CHECK(h0(1, 1) == doctest::Approx(1.0 / s));
}

TEST_CASE("forward agrees with the scalar reference in both modes") {
  ModelParams p = init_model(11);
  CounterRng rng(5);
  for (auto& l : p.layers) {
    for (int c = 0; c < kEmbed; ++c) {
      l.running_mean[c] = rng.uniform(-0.5, 0.5);
      l.running_var[c] = rng.uniform(0.5, 2.0);
      l.gamma[c] = rng.uniform(0.5, 1.5);
      l.beta[c] = rng.uniform(-0.2, 0.2);
    }
  }
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 4; ++k) graphs.push_back(random_graph(6 + 3 * k, 0.3, 100 + k));
  std::vector<const SpatialGraph*> gp;
  for (const auto& g : graphs) gp.push_back(&g);

  for (std::size_t k = 0; k < graphs.size(); ++k) {
    const auto z = ref_logits({gp[k]}, p, Mode::Eval);
    const Prediction pr = model_forward(graphs[k], p, Mode::Eval);
    CHECK(pr.logits[0] == doctest::Approx(z[0][0]).epsilon(1e-12));
    CHECK(pr.logits[1] == doctest::Approx(z[0][1]).epsilon(1e-12));
    CHECK(pr.probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto t = tensors_of(graphs);
  const auto ptrs = pointers(t);
  const double loss = batch_loss(ptrs, p);
  CHECK(loss == doctest::Approx(ref_loss(gp, p)).epsilon(1e-12));
  CHECK(loss >= 0.0);
  CHECK(loss_and_gradients(ptrs, p).loss == doctest::Approx(loss).epsilon(1e-14));
}

TEST_CASE("logits are invariant under node relabeling") {
  const ModelParams p = init_model(2);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const SpatialGraph g = random_graph(12, 0.3, 200 + k);
    const Prediction ref = model_forward(g, p, Mode::Eval);
    for (std::uint64_t q = 0; q < 5; ++q) {
      const SpatialGraph h = permute_graph(g, random_permutation(12, 1000 * k + q));
      const Prediction pr = model_forward(h, p, Mode::Eval);
      CHECK(std::abs(pr.logits[0] - ref.logits[0]) < 1e-9);
      CHECK(std::abs(pr.logits[1] - ref.logits[1]) < 1e-9);
    }
  }
}

TEST_CASE("a duplicated node does not change the logits") {
  const ModelParams p = init_model(8);
  SpatialGraph g = random_graph(9, 0.4, 300);
  const Prediction before = model_forward(g, p, Mode::Eval);
  // Copy node 4 with all of its links plus a link to the original.
  const int dup = g.node_count();
  g.nodes.push_back(g.nodes[4]);
  std::vector<std::pair<int, int>> extra = {{dup, dup}, {4, dup}};
  for (auto [i, j] : g.edges) {
    if (i == 4 && j != 4) extra.emplace_back(j, dup);
    if (j == 4 && i != 4) extra.emplace_back(i, dup);
  }
  g.edges.insert(g.edges.end(), extra.begin(), extra.end());
  std::sort(g.edges.begin(), g.edges.end());
  const Prediction after = model_forward(g, p, Mode::Eval);
  CHECK(after.logits[0] == doctest::Approx(before.logits[0]).epsilon(1e-12));
  CHECK(after.logits[1] == doctest::Approx(before.logits[1]).epsilon(1e-12));
}

TEST_CASE("loss values at uniform and saturated logits") {
  ModelParams p = init_model(1);
  p.classifier.setZero();
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 3; ++k) graphs.push_back(random_graph(5, 0.5, 400 + k));
  auto t = tensors_of(graphs);
  CHECK(batch_loss(pointers(t), p) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  for (auto& g : t) g.label = 1;
  p.classifier_bias << -30.0, 30.0;
  const double saturated = batch_loss(pointers(t), p);
  CHECK(saturated >= 0.0);
  CHECK(saturated < 1e-20);
}

TEST_CASE("gradients match pattern-aware finite differences") {
  const ModelParams p = init_model(21);
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 4; ++k) graphs.push_back(random_graph(5 + k, 0.4, 500 + k));
  const auto t = tensors_of(graphs);
  const auto checks = finite_difference_check(pointers(t), p, 1e-5, 13);
  CHECK(checks.size() == 6u * kLayers + 2u);
  for (const auto& [name, gc] : checks) {
    INFO(name);
    CHECK(gc.worst < 1e-4);
    CHECK(gc.checked > 0);
  }
}

TEST_CASE("gradient of the classifier has the closed form") {
  const ModelParams p = init_model(4);
  std::vector<SpatialGraph> graphs = {random_graph(7, 0.3, 600), random_graph(4, 0.6, 601)};
  const auto t = tensors_of(graphs);
  const LossResult r = loss_and_gradients(pointers(t), p);
  // dL/db_k = mean over graphs of (p_k - [label == k]).
  for (int k = 0; k < 2; ++k) {
    double expect = 0.0;
    for (std::size_t g = 0; g < t.size(); ++g) {
      expect += r.predictions[g].probs[k] - (t[g].label == k ? 1.0 : 0.0);
    }
    CHECK(r.grads.classifier_bias[k] == doctest::Approx(expect / 2.0).epsilon(1e-14));
  }
  // Softmax gradients sum to zero across the classes.
  CHECK(std::abs(r.grads.classifier_bias.sum()) < 1e-15);
}

TEST_CASE("batch statistics feed the running estimates") {
  ModelParams p = init_model(5);
  const std::vector<SpatialGraph> graphs = {random_graph(6, 0.4, 700), random_graph(5, 0.4, 701)};
  const auto t = tensors_of(graphs);
  const LossResult r = loss_and_gradients(pointers(t), p);
  const RowVector m0 = p.layers[0].running_mean;
  const RowVector v0 = p.layers[0].running_var;
  update_running_stats(p, r.stats);
  CHECK(p.layers[0].running_mean.isApprox(0.9 * m0 + 0.1 * r.stats.mean[0]));
  CHECK(p.layers[0].running_var.isApprox(0.9 * v0 + 0.1 * r.stats.var_unbiased[0]));
  CHECK((r.stats.var_unbiased[2].array() >= 0.0).all());
}

TEST_CASE("recalibrated statistics equal population moments layer by layer") {
  ModelParams p = init_model(8);
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 7; ++k) graphs.push_back(random_graph(4 + k, 0.35, 900 + k));
  const auto t = tensors_of(graphs);
  ModelParams a = p, b = p;
  recalibrate_batch_norm(a, t, 3);
  recalibrate_batch_norm(b, t, 100);

  // Oracle: with unit gamma, zero beta and (mean, var) = (0, 1 - eps) the
  // reference layer returns lrelu(aggregate), which inverts exactly.
  std::vector<const SpatialGraph*> gp;
  for (const auto& g : graphs) gp.push_back(&g);
  std::vector<std::vector<double>> h;
  for (const auto& g : graphs)
    for (const auto& f : g.nodes) h.push_back({f.x, f.y, f.area, f.eccentricity});
  for (int l = 0; l < kLayers; ++l) {
    LayerParams probe = p.layers[l];
    probe.gamma.setOnes();
    probe.beta.setZero();
    probe.running_mean.setZero();
    probe.running_var.setConstant(1.0 - p.bn_eps);
    const auto y = ref_layer(gp, h, probe, Mode::Eval, p.slope, p.bn_eps);
    const double n = static_cast<double>(y.size());
    for (int c = 0; c < kEmbed; ++c) {
      long double s = 0.0L, s2 = 0.0L;
      for (const auto& row : y) s += row[c] > 0.0 ? row[c] : row[c] / p.slope;
      const long double mean = s / n;
      for (const auto& row : y) {
        const long double v = (row[c] > 0.0 ? row[c] : row[c] / p.slope) - mean;
        s2 += v * v;
      }
      const double var = static_cast<double>(s2 / (n - 1));
      CHECK(a.layers[l].running_mean[c] == doctest::Approx(static_cast<double>(mean)).epsilon(1e-9));
      CHECK(a.layers[l].running_var[c] == doctest::Approx(var).epsilon(1e-9));
      CHECK(std::abs(a.layers[l].running_mean[c] - b.layers[l].running_mean[c]) < 1e-12);
      CHECK(std::abs(a.layers[l].running_var[c] - b.layers[l].running_var[c]) < 1e-12 * (1.0 + var));
    }
    h = ref_layer(gp, h, a.layers[l], Mode::Eval, p.slope, p.bn_eps);
  }
  CHECK_THROWS_AS(recalibrate_batch_norm(a, std::span<const GraphTensor>{}), ArgumentError);
}

TEST_CASE("invalid inputs are rejected") {
  const ModelParams p = init_model(0);
  SpatialGraph no_loop;
  no_loop.nodes = {{0, 0, 0, 0}, {1, 1, 0, 0}};
  no_loop.edges = {{0, 1}};
  CHECK_THROWS_AS(to_tensor(no_loop), ArgumentError);
  CHECK_THROWS_AS(model_forward(SpatialGraph{}, p, Mode::Eval), ArgumentError);
  CHECK_THROWS_AS(batch_loss(std::span<const GraphTensor* const>{}, p), ArgumentError);

  const SpatialGraph unlabeled = [] {
    SpatialGraph g = random_graph(4, 0.5, 9);
    g.label = -1;
    return g;
  }();
  const GraphTensor t = to_tensor(unlabeled);
  const GraphTensor* ptr = &t;
  CHECK_THROWS_AS(loss_and_gradients(std::span(&ptr, 1), p), ArgumentError);

  ModelParams nan = p;
  nan.classifier(0, 0) = std::numeric_limits<double>::quiet_NaN();
  GraphTensor labeled = to_tensor(random_graph(4, 0.5, 10));
  const GraphTensor* lp = &labeled;
  try {
    loss_and_gradients(std::span(&lp, 1), nan, 17);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }

  ModelParams wrong = p;
  wrong.layers[1].w1.resize(10, kHidden);
  CHECK_THROWS_AS(model_forward(labeled, wrong, Mode::Eval), ShapeError);
}

TEST_CASE("adam matches a hand-written update") {
  ModelParams p = zeros_like(init_model(0));
  ModelParams g = zeros_like(p);
  TrainConfig cfg;
  cfg.lr = 0.01;
  AdamOptimizer opt(p, cfg);
  const double g1 = 0.5, g2 = -2.0;
  g.classifier(3, 1) = g1;
  opt.step(p, g);
  // First step moves by lr * sign(g) up to eps.
  CHECK(p.classifier(3, 1) == doctest::Approx(-0.01 * g1 / (std::abs(g1) + 1e-8)).epsilon(1e-14));
  g.classifier(3, 1) = g2;
  opt.step(p, g);
  const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double expect = -0.01 * g1 / (std::abs(g1) + 1e-8) - 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(p.classifier(3, 1) == doctest::Approx(expect).epsilon(1e-13));
  CHECK(p.classifier(0, 0) == 0.0);
  CHECK(opt.step_count() == 2);
  CHECK_THROWS_AS(AdamOptimizer(p, TrainConfig{.lr = 0.0}), ArgumentError);
}

TEST_CASE("training is deterministic and lowers the loss") {
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 12; ++k) {
    SpatialGraph g = random_graph(6, 0.4, 800 + k);
    // A label the features can explain: the mean x of the nodes.
    double mx = 0.0;
    for (const auto& n : g.nodes) mx += n.x;
    g.label = mx / g.node_count() > 0.5 ? 1 : 0;
    graphs.push_back(g);
  }
  const auto t = tensors_of(graphs);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 4;
  cfg.lr = 1e-2;
  cfg.seed = 42;
  int callbacks = 0;
  const TrainResult a = train(t, std::span(t).first(4), cfg, [&](const EpochRecord&) { ++callbacks; });
  const TrainResult b = train(t, std::span(t).first(4), cfg);
  CHECK(callbacks == 15);
  CHECK(same_bits(a.params, b.params));
  REQUIRE(a.history.size() == 15u);
  CHECK(a.history.back().train_loss < a.history.front().train_loss);
  for (std::size_t k = 0; k < a.history.size(); ++k) {
    CHECK(a.history[k].epoch == static_cast<int>(k) + 1);
    CHECK(std::memcmp(&a.history[k].train_loss, &b.history[k].train_loss, sizeof(double)) == 0);
  }
  cfg.seed = 43;
  CHECK_FALSE(same_bits(train(t, {}, cfg).params, a.params));
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(t, {}, cfg), ArgumentError);
  CHECK(train(t, {}, TrainConfig{.epochs = 1}).history[0].val_acc == 0.0);
}

TEST_CASE("evaluate counts correct predictions") {
  ModelParams p = init_model(0);
  p.classifier.setZero();
  p.classifier_bias << 1.0, 0.0;
  std::vector<SpatialGraph> graphs;
  for (int k = 0; k < 10; ++k) {
    SpatialGraph g = random_graph(4, 0.5, 900 + k);
    g.label = k % 2;
    graphs.push_back(g);
  }
  const auto t = tensors_of(graphs);
  const Evaluation all0 = evaluate(p, t);
  CHECK(all0.accuracy == 0.5);
  for (const auto& pr : all0.predictions) CHECK(pr.predicted == 0);

  const ModelParams q = init_model(6);
  const Evaluation e1 = evaluate(q, t);
  const Evaluation e2 = evaluate(q, t);
  int correct = 0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    const Prediction pr = model_forward(graphs[k], q, Mode::Eval);
    correct += (pr.probs[1] > pr.probs[0] ? 1 : 0) == graphs[k].label;
    CHECK(e1.predictions[k].probs == e2.predictions[k].probs);
  }
  CHECK(e1.accuracy == doctest::Approx(correct / 10.0));
  CHECK(evaluate(q, {}).accuracy == 0.0);
}

TEST_CASE("model blob and history round trips") {
  ModelParams p = init_model(77);
  p.layers[2].running_mean.setConstant(0.25);
  std::stringstream io;
  write_model_blob(io, p, R"({"digest":"abc","epochs":50})");
  CHECK(io.str().substr(0, 8) == "BKLGNN01");
  const auto [back, meta] = read_model_blob(io);
  CHECK(same_bits(back, p));
  CHECK(back.seed == 77);
  CHECK(meta.find("\"digest\":\"abc\"") != std::string::npos);

  std::stringstream cut(io.str().substr(0, io.str().size() - 8));
  CHECK_THROWS_AS(read_model_blob(cut), FormatError);
  std::stringstream bad("BKLGNN02xxxxxxxx");
  CHECK_THROWS_AS(read_model_blob(bad), FormatError);

  const std::vector<EpochRecord> hist = {{1, 0.6931471805599453, 0.5}, {2, 0.1 + 0.2, 0.75}};
  std::stringstream h;
  write_history_csv(h, hist);
  CHECK(h.str().rfind("epoch,train_loss,val_acc\n", 0) == 0);
  const auto hb = read_history_csv(h);
  REQUIRE(hb.size() == 2u);
  CHECK(hb[1].train_loss == hist[1].train_loss);
  CHECK(hb[0].val_acc == 0.5);
}
