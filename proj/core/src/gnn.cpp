#include "buckle/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "buckle/error.hpp"
#include "buckle/rng.hpp"

namespace buckle {

namespace {

constexpr int kChunkEdges = 4096;

inline double lrelu(double v, double slope) { return v > 0.0 ? v : slope * v; }
inline double lrelu_grad(double v, double slope) { return v > 0.0 ? 1.0 : slope; }

void fill_uniform(Matrix& m, CounterRng& rng, double bound) {
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
}

// Several graphs stacked into one disconnected graph.
struct Batch {
  Matrix features;
  Matrix positions;
  std::vector<int> offsets;    // per node into neighbors
  std::vector<int> neighbors;  // global node ids
  std::vector<int> graph_start;
  std::vector<Label> labels;

  int nodes() const { return static_cast<int>(features.rows()); }
  int graphs() const { return static_cast<int>(graph_start.size()) - 1; }
};

Batch make_batch(std::span<const GraphTensor* const> graphs) {
  Batch b;
  int n = 0;
  std::size_t m = 0;
  for (const GraphTensor* g : graphs) {
    if (g->node_count() == 0) throw ArgumentError("graph without nodes");
    n += g->node_count();
    m += g->neighbors.size();
  }
  b.features.resize(n, kNodeFeatures);
  b.positions.resize(n, kEdgeFeatures);
  b.offsets.reserve(static_cast<std::size_t>(n) + 1);
  b.neighbors.reserve(m);
  b.offsets.push_back(0);
  int base = 0;
  for (const GraphTensor* g : graphs) {
    b.graph_start.push_back(base);
    b.features.middleRows(base, g->node_count()) = g->features;
    b.positions.middleRows(base, g->node_count()) = g->positions;
    for (int i = 0; i < g->node_count(); ++i) {
      for (int k = g->offsets[i]; k < g->offsets[i + 1]; ++k) b.neighbors.push_back(base + g->neighbors[k]);
      b.offsets.push_back(static_cast<int>(b.neighbors.size()));
    }
    b.labels.push_back(g->label);
    base += g->node_count();
  }
  b.graph_start.push_back(base);
  return b;
}

struct LayerCache {
  Matrix input;
  Matrix a;  // h W1_h + x W1_x
  Matrix b;  // x W1_x
  std::vector<int> arg;  // per (node, channel): edge slot into neighbors
  Matrix xhat;
  RowVector inv_std;
  Matrix y;  // BatchNorm output before the activation
};

Matrix layer_forward(const Batch& batch, const Matrix& h, const LayerParams& p, Mode mode,
                     double slope, double eps, LayerCache* cache, RowVector* mean_out,
                     RowVector* var_out, std::uint64_t* pattern = nullptr) {
  const int d = static_cast<int>(h.cols());
  const int n = batch.nodes();
  if (h.rows() != n || p.w1.rows() != d + kEdgeFeatures || p.w1.cols() != kHidden ||
      p.w2.rows() != kHidden || p.w2.cols() != kEmbed) {
    throw ShapeError("layer input has " + std::to_string(h.rows()) + "x" + std::to_string(d) +
                     " entries but weights expect " + std::to_string(p.w1.rows() - kEdgeFeatures) +
                     " features");
  }
  Matrix B = batch.positions * p.w1.bottomRows(kEdgeFeatures);
  Matrix A = h * p.w1.topRows(d);
  A += B;

  Matrix agg = Matrix::Constant(n, kEmbed, -std::numeric_limits<double>::infinity());
  std::vector<int> arg(static_cast<std::size_t>(n) * kEmbed, -1);
  Matrix hidden;
  Matrix msg;
  int node = 0;
  while (node < n) {
    int end = node;
    while (end < n && (end == node || batch.offsets[end + 1] - batch.offsets[node] <= kChunkEdges)) ++end;
    const int e0 = batch.offsets[node];
    const int ec = batch.offsets[end] - e0;
    hidden.resize(ec, kHidden);
    for (int i = node; i < end; ++i) {
      for (int e = batch.offsets[i]; e < batch.offsets[i + 1]; ++e) {
        const int j = batch.neighbors[e];
        auto row = hidden.row(e - e0);
        row = A.row(j) - B.row(i) + p.b1;
        if (pattern) {
          std::uint64_t bits = 0;
          for (int c = 0; c < kHidden; ++c) bits = (bits << 1) ^ (row[c] > 0.0 ? 1u : 0u) ^ (bits >> 63);
          *pattern = mix64(*pattern ^ bits);
        }
        for (int c = 0; c < kHidden; ++c) row[c] = lrelu(row[c], slope);
      }
    }
    msg.noalias() = hidden * p.w2;
    msg.rowwise() += p.b2;
    for (int i = node; i < end; ++i) {
      double* out = agg.row(i).data();
      int* best = arg.data() + static_cast<std::size_t>(i) * kEmbed;
      for (int e = batch.offsets[i]; e < batch.offsets[i + 1]; ++e) {
        const double* m = msg.row(e - e0).data();
        for (int c = 0; c < kEmbed; ++c) {
          if (m[c] > out[c]) {
            out[c] = m[c];
            best[c] = e;
          }
        }
      }
    }
    node = end;
  }

  RowVector mean, var;
  if (mode == Mode::Train) {
    mean = agg.colwise().mean();
    var = (agg.rowwise() - mean).array().square().colwise().mean().matrix();
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }
  RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = ((agg.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  Matrix y = ((xhat.array().rowwise() * p.gamma.array()).rowwise() + p.beta.array()).matrix();
  Matrix out = y.unaryExpr([slope](double v) { return lrelu(v, slope); });
  if (pattern) {
    for (int a : arg) *pattern = mix64(*pattern ^ static_cast<std::uint64_t>(a));
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      *pattern = mix64(*pattern ^ (y.data()[k] > 0.0 ? 0x9e37ULL : 0x7f4aULL));
    }
  }

  if (mean_out) *mean_out = mean;
  if (var_out) {
    *var_out = n > 1 ? RowVector(var * (static_cast<double>(n) / (n - 1))) : var;
  }
  if (cache) {
    cache->input = h;
    cache->a = std::move(A);
    cache->b = std::move(B);
    cache->arg = std::move(arg);
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->y = std::move(y);
  }
  return out;
}

// Accumulates parameter gradients into g and returns dL/d(input).
Matrix layer_backward(const Batch& batch, const LayerParams& p, const LayerCache& c,
                      const Matrix& dout, LayerParams& g, double slope) {
  const int n = batch.nodes();
  const int d = static_cast<int>(c.input.cols());
  Matrix dy = dout;
  for (Eigen::Index k = 0; k < dy.size(); ++k) dy.data()[k] *= lrelu_grad(c.y.data()[k], slope);

  g.gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  Matrix dxhat = (dy.array().rowwise() * p.gamma.array()).matrix();
  const RowVector sum_dxhat = dxhat.colwise().sum();
  const RowVector sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).colwise().sum().matrix();
  Matrix dz(n, kEmbed);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < kEmbed; ++ch) {
      dz(i, ch) = c.inv_std[ch] / n *
                  (n * dxhat(i, ch) - sum_dxhat[ch] - c.xhat(i, ch) * sum_dxhat_xhat[ch]);
    }
  }

  Matrix dA = Matrix::Zero(n, kHidden);
  Matrix dB = Matrix::Zero(n, kHidden);
  const Matrix w2t = p.w2.transpose();  // rows are output channels
  Matrix dw2t = Matrix::Zero(kEmbed, kHidden);
  using Row = Eigen::Matrix<double, 1, kHidden>;
  using RowMap = Eigen::Map<Row>;
  using ConstRowMap = Eigen::Map<const Row>;
  const ConstRowMap b1(p.b1.data());
  RowMap db1(g.b1.data());
  std::vector<std::pair<int, int>> routed;  // (edge slot, channel)
  Row pre, hid, dhid;
  for (int i = 0; i < n; ++i) {
    routed.clear();
    for (int ch = 0; ch < kEmbed; ++ch) {
      if (dz(i, ch) != 0.0) routed.emplace_back(c.arg[static_cast<std::size_t>(i) * kEmbed + ch], ch);
    }
    std::sort(routed.begin(), routed.end());
    const ConstRowMap bi(c.b.row(i).data());
    RowMap dbi(dB.row(i).data());
    std::size_t k = 0;
    while (k < routed.size()) {
      const int e = routed[k].first;
      const int j = batch.neighbors[e];
      pre = ConstRowMap(c.a.row(j).data()) - bi + b1;
      hid = pre.unaryExpr([slope](double v) { return lrelu(v, slope); });
      dhid.setZero();
      for (; k < routed.size() && routed[k].first == e; ++k) {
        const int ch = routed[k].second;
        const double gv = dz(i, ch);
        g.b2[ch] += gv;
        RowMap(dw2t.row(ch).data()) += gv * hid;
        dhid += gv * ConstRowMap(w2t.row(ch).data());
      }
      dhid.array() *= pre.array().unaryExpr([slope](double v) { return lrelu_grad(v, slope); });
      RowMap(dA.row(j).data()) += dhid;
      dbi -= dhid;
      db1 += dhid;
    }
  }
  g.w2 += dw2t.transpose();
  g.w1.topRows(d).noalias() += c.input.transpose() * dA;
  g.w1.bottomRows(kEdgeFeatures).noalias() += batch.positions.transpose() * (dA + dB);
  return dA * p.w1.topRows(d).transpose();
}

struct ForwardState {
  std::array<LayerCache, kLayers> caches;
  std::array<Matrix, kLayers> outputs;
  Matrix pooled;              // graphs x kReadout
  std::vector<int> pool_arg;  // graphs x kReadout node ids
  Matrix logits;              // graphs x kClasses
  BatchStats stats;
};

void forward_batch(const Batch& batch, const ModelParams& params, Mode mode, ForwardState& st,
                   bool keep_caches, std::uint64_t* pattern = nullptr) {
  Matrix h = batch.features;
  for (int l = 0; l < kLayers; ++l) {
    st.outputs[l] = layer_forward(batch, h, params.layers[l], mode, params.slope, params.bn_eps,
                                  keep_caches ? &st.caches[l] : nullptr, &st.stats.mean[l],
                                  &st.stats.var_unbiased[l], pattern);
    h = st.outputs[l];
  }
  const int G = batch.graphs();
  st.pooled = Matrix::Constant(G, kReadout, -std::numeric_limits<double>::infinity());
  st.pool_arg.assign(static_cast<std::size_t>(G) * kReadout, -1);
  for (int gi = 0; gi < G; ++gi) {
    for (int i = batch.graph_start[gi]; i < batch.graph_start[gi + 1]; ++i) {
      for (int l = 0; l < kLayers; ++l) {
        for (int ch = 0; ch < kEmbed; ++ch) {
          const int col = l * kEmbed + ch;
          const double v = st.outputs[l](i, ch);
          if (v > st.pooled(gi, col)) {
            st.pooled(gi, col) = v;
            st.pool_arg[static_cast<std::size_t>(gi) * kReadout + col] = i;
          }
        }
      }
    }
  }
  if (pattern) {
    for (int a : st.pool_arg) *pattern = mix64(*pattern ^ static_cast<std::uint64_t>(a));
  }
  st.logits = st.pooled * params.classifier;
  st.logits.rowwise() += params.classifier_bias;
}

Prediction make_prediction(const Eigen::Ref<const Eigen::Matrix<double, 1, kClasses>>& logits) {
  Prediction p;
  p.logits = logits.transpose();
  const double mx = p.logits.maxCoeff();
  Eigen::Vector2d ex = (p.logits.array() - mx).exp().matrix();
  p.probs = ex / ex.sum();
  p.predicted = p.probs[1] > p.probs[0] ? 1 : 0;
  return p;
}

double cross_entropy(const Prediction& p, Label label) {
  const double mx = p.logits.maxCoeff();
  const double lse = mx + std::log((p.logits.array() - mx).exp().sum());
  return lse - p.logits[label];
}

void check_labels(const Batch& batch) {
  for (Label l : batch.labels) {
    if (l != 0 && l != 1) throw ArgumentError("batch contains an unlabeled graph");
  }
}

}  // namespace

std::size_t ModelParams::trainable_count() const {
  std::size_t n = static_cast<std::size_t>(classifier.size() + classifier_bias.size());
  for (const auto& l : layers) {
    n += static_cast<std::size_t>(l.w1.size() + l.b1.size() + l.w2.size() + l.b2.size() +
                                  l.gamma.size() + l.beta.size());
  }
  return n;
}

ModelParams init_model(std::uint64_t seed) {
  ModelParams p;
  p.seed = seed;
  CounterRng rng(derive_key(seed, 0x494E4954));
  int in = kNodeFeatures;
  for (auto& l : p.layers) {
    l.w1.resize(in + kEdgeFeatures, kHidden);
    fill_uniform(l.w1, rng, 1.0 / std::sqrt(static_cast<double>(in + kEdgeFeatures)));
    l.b1 = RowVector::Zero(kHidden);
    l.w2.resize(kHidden, kEmbed);
    fill_uniform(l.w2, rng, 1.0 / std::sqrt(static_cast<double>(kHidden)));
    l.b2 = RowVector::Zero(kEmbed);
    l.gamma = RowVector::Ones(kEmbed);
    l.beta = RowVector::Zero(kEmbed);
    l.running_mean = RowVector::Zero(kEmbed);
    l.running_var = RowVector::Ones(kEmbed);
    in = kEmbed;
  }
  p.classifier.resize(kReadout, kClasses);
  fill_uniform(p.classifier, rng, 1.0 / std::sqrt(static_cast<double>(kReadout)));
  p.classifier_bias = RowVector::Zero(kClasses);
  return p;
}

ModelParams zeros_like(const ModelParams& like) {
  ModelParams z = like;
  for (auto& l : z.layers) {
    l.w1.setZero();
    l.b1.setZero();
    l.w2.setZero();
    l.b2.setZero();
    l.gamma.setZero();
    l.beta.setZero();
    l.running_mean.setZero();
    l.running_var.setZero();
  }
  z.classifier.setZero();
  z.classifier_bias.setZero();
  return z;
}

void for_each_trainable(ModelParams& params,
                        const std::function<void(const std::string&, double*, Eigen::Index)>& fn) {
  for (int l = 0; l < kLayers; ++l) {
    auto& p = params.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    fn(pre + "w1", p.w1.data(), p.w1.size());
    fn(pre + "b1", p.b1.data(), p.b1.size());
    fn(pre + "w2", p.w2.data(), p.w2.size());
    fn(pre + "b2", p.b2.data(), p.b2.size());
    fn(pre + "bn.gamma", p.gamma.data(), p.gamma.size());
    fn(pre + "bn.beta", p.beta.data(), p.beta.size());
  }
  fn("classifier.weight", params.classifier.data(), params.classifier.size());
  fn("classifier.bias", params.classifier_bias.data(), params.classifier_bias.size());
}

GraphTensor to_tensor(const SpatialGraph& graph) {
  GraphTensor t;
  const int n = graph.node_count();
  t.features.resize(n, kNodeFeatures);
  t.positions.resize(n, kEdgeFeatures);
  for (int i = 0; i < n; ++i) {
    const auto& f = graph.nodes[i];
    t.features.row(i) << f.x, f.y, f.area, f.eccentricity;
    t.positions.row(i) << f.x, f.y;
  }
  const auto adj = graph.adjacency();
  t.offsets.push_back(0);
  for (int i = 0; i < n; ++i) {
    if (!std::binary_search(adj[i].begin(), adj[i].end(), i)) {
      throw ArgumentError("graph '" + graph.id + "' lacks a self-loop on node " + std::to_string(i));
    }
    t.neighbors.insert(t.neighbors.end(), adj[i].begin(), adj[i].end());
    t.offsets.push_back(static_cast<int>(t.neighbors.size()));
  }
  t.label = graph.label;
  return t;
}

Matrix pointnet_layer_forward(const GraphTensor& graph, const Matrix& h, const LayerParams& params,
                              Mode mode, double slope, double bn_eps) {
  const GraphTensor* ptr = &graph;
  const Batch batch = make_batch(std::span<const GraphTensor* const>(&ptr, 1));
  return layer_forward(batch, h, params, mode, slope, bn_eps, nullptr, nullptr, nullptr);
}

Prediction model_forward(const GraphTensor& graph, const ModelParams& params, Mode mode) {
  if (graph.node_count() == 0) throw ArgumentError("cannot classify an empty graph");
  const GraphTensor* ptr = &graph;
  const Batch batch = make_batch(std::span<const GraphTensor* const>(&ptr, 1));
  ForwardState st;
  forward_batch(batch, params, mode, st, false);
  return make_prediction(st.logits.row(0));
}

Prediction model_forward(const SpatialGraph& graph, const ModelParams& params, Mode mode) {
  if (graph.node_count() == 0) throw ArgumentError("cannot classify an empty graph");
  return model_forward(to_tensor(graph), params, mode);
}

double batch_loss(std::span<const GraphTensor* const> batch_graphs, const ModelParams& params,
                  std::uint64_t* pattern) {
  if (batch_graphs.empty()) throw ArgumentError("empty batch");
  const Batch batch = make_batch(batch_graphs);
  check_labels(batch);
  ForwardState st;
  if (pattern) *pattern = 0;
  forward_batch(batch, params, Mode::Train, st, false, pattern);
  double loss = 0.0;
  for (int gi = 0; gi < batch.graphs(); ++gi) {
    loss += cross_entropy(make_prediction(st.logits.row(gi)), batch.labels[gi]);
  }
  return loss / batch.graphs();
}

LossResult loss_and_gradients(std::span<const GraphTensor* const> batch_graphs,
                              const ModelParams& params, std::int64_t batch_id) {
  if (batch_graphs.empty()) throw ArgumentError("empty batch");
  const Batch batch = make_batch(batch_graphs);
  check_labels(batch);
  ForwardState st;
  forward_batch(batch, params, Mode::Train, st, true);

  const int G = batch.graphs();
  LossResult out;
  out.grads = zeros_like(params);
  Matrix dlogits(G, kClasses);
  for (int gi = 0; gi < G; ++gi) {
    Prediction p = make_prediction(st.logits.row(gi));
    out.loss += cross_entropy(p, batch.labels[gi]);
    for (int k = 0; k < kClasses; ++k) {
      dlogits(gi, k) = (p.probs[k] - (k == batch.labels[gi] ? 1.0 : 0.0)) / G;
    }
    out.predictions.push_back(p);
  }
  out.loss /= G;
  if (!std::isfinite(out.loss)) {
    throw NumericalError("non-finite loss in batch " + std::to_string(batch_id));
  }
  out.stats = st.stats;

  out.grads.classifier.noalias() = st.pooled.transpose() * dlogits;
  out.grads.classifier_bias = dlogits.colwise().sum();
  const Matrix dpooled = dlogits * params.classifier.transpose();

  std::array<Matrix, kLayers> dout;
  for (auto& m : dout) m = Matrix::Zero(batch.nodes(), kEmbed);
  for (int gi = 0; gi < G; ++gi) {
    for (int col = 0; col < kReadout; ++col) {
      const int node = st.pool_arg[static_cast<std::size_t>(gi) * kReadout + col];
      dout[col / kEmbed](node, col % kEmbed) += dpooled(gi, col);
    }
  }
  for (int l = kLayers - 1; l >= 0; --l) {
    Matrix dh = layer_backward(batch, params.layers[l], st.caches[l], dout[l], out.grads.layers[l],
                               params.slope);
    if (l > 0) dout[l - 1] += dh;
  }
  return out;
}

void update_running_stats(ModelParams& params, const BatchStats& stats) {
  const double m = params.bn_momentum;
  for (int l = 0; l < kLayers; ++l) {
    auto& p = params.layers[l];
    p.running_mean = (1.0 - m) * p.running_mean + m * stats.mean[l];
    p.running_var = (1.0 - m) * p.running_var + m * stats.var_unbiased[l];
  }
}

AdamOptimizer::AdamOptimizer(const ModelParams& like, const TrainConfig& cfg)
    : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {
  if (!(cfg.lr > 0.0)) throw ArgumentError("learning rate must be positive");
}

void AdamOptimizer::step(ModelParams& params, ModelParams& grads) {
  ++t_;
  std::vector<std::pair<double*, Eigen::Index>> p, g, m, v;
  auto collect = [](std::vector<std::pair<double*, Eigen::Index>>& dst) {
    return [&dst](const std::string&, double* data, Eigen::Index n) { dst.emplace_back(data, n); };
  };
  for_each_trainable(params, collect(p));
  for_each_trainable(grads, collect(g));
  for_each_trainable(m_, collect(m));
  for_each_trainable(v_, collect(v));
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < p.size(); ++k) {
    double* pd = p[k].first;
    const double* gd = g[k].first;
    double* md = m[k].first;
    double* vd = v[k].first;
    for (Eigen::Index q = 0; q < p[k].second; ++q) {
      md[q] = cfg_.beta1 * md[q] + (1.0 - cfg_.beta1) * gd[q];
      vd[q] = cfg_.beta2 * vd[q] + (1.0 - cfg_.beta2) * gd[q] * gd[q];
      const double mhat = md[q] / bc1;
      const double vhat = vd[q] / bc2;
      pd[q] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void recalibrate_batch_norm(ModelParams& params, std::span<const GraphTensor> graphs, int chunk) {
  if (graphs.empty()) throw ArgumentError("no graphs to estimate BatchNorm statistics from");
  if (chunk < 1) throw ArgumentError("chunk must be >= 1");
  std::vector<Batch> batches;
  for (std::size_t s = 0; s < graphs.size(); s += static_cast<std::size_t>(chunk)) {
    std::vector<const GraphTensor*> ptrs;
    for (std::size_t k = s; k < std::min(graphs.size(), s + static_cast<std::size_t>(chunk)); ++k) {
      ptrs.push_back(&graphs[k]);
    }
    batches.push_back(make_batch(ptrs));
  }
  for (int l = 0; l < kLayers; ++l) {
    // Chan's pairwise merge of per-chunk means and squared deviations.
    double count = 0.0;
    RowVector mean = RowVector::Zero(kEmbed), m2 = RowVector::Zero(kEmbed);
    for (const Batch& b : batches) {
      Matrix h = b.features;
      for (int k = 0; k < l; ++k) {
        h = layer_forward(b, h, params.layers[k], Mode::Eval, params.slope, params.bn_eps, nullptr, nullptr,
                          nullptr, nullptr);
      }
      RowVector bm, bv;
      layer_forward(b, h, params.layers[l], Mode::Train, params.slope, params.bn_eps, nullptr, &bm, &bv, nullptr);
      const double n = static_cast<double>(h.rows());
      const RowVector bm2 = n > 1 ? RowVector(bv * (n - 1.0)) : RowVector(RowVector::Zero(kEmbed));
      const RowVector delta = bm - mean;
      const double total = count + n;
      mean += delta * (n / total);
      m2 += bm2 + delta.cwiseProduct(delta) * (count * n / total);
      count = total;
    }
    params.layers[l].running_mean = mean;
    params.layers[l].running_var = count > 1.0 ? RowVector(m2 / (count - 1.0)) : m2;
  }
}

TrainResult train(std::span<const GraphTensor> train_set, std::span<const GraphTensor> val_set,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  if (cfg.epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (train_set.empty()) throw ArgumentError("empty training set");
  TrainResult out;
  out.params = init_model(cfg.seed);
  AdamOptimizer opt(out.params, cfg);

  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<GraphTensor> calibration;
  if (cfg.bn_recalibration > 0) {
    const std::size_t step = (train_set.size() + cfg.bn_recalibration - 1) / cfg.bn_recalibration;
    for (std::size_t k = 0; k < train_set.size(); k += step) calibration.push_back(train_set[k]);
  }
  std::vector<const GraphTensor*> batch;
  std::int64_t batch_id = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      CounterRng rng(derive_key(cfg.seed, 0x53480000ULL + static_cast<std::uint64_t>(epoch)));
      for (std::size_t k = order.size(); k > 1; --k) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        std::swap(order[k - 1], order[j]);
      }
    }
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      batch.clear();
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = s; k < e; ++k) batch.push_back(&train_set[order[k]]);
      LossResult r = loss_and_gradients(batch, out.params, batch_id++);
      update_running_stats(out.params, r.stats);
      opt.step(out.params, r.grads);
      total += r.loss * static_cast<double>(batch.size());
    }
    if (!calibration.empty()) recalibrate_batch_norm(out.params, calibration);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(order.size());
    rec.val_acc = val_set.empty() ? 0.0 : evaluate(out.params, val_set).accuracy;
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

Evaluation evaluate(const ModelParams& params, std::span<const GraphTensor> dataset) {
  Evaluation ev;
  std::size_t correct = 0;
  for (const auto& g : dataset) {
    Prediction p = model_forward(g, params, Mode::Eval);
    if (p.predicted == g.label) ++correct;
    ev.predictions.push_back(p);
  }
  ev.accuracy = dataset.empty() ? 0.0 : static_cast<double>(correct) / dataset.size();
  return ev;
}

}  // namespace buckle
