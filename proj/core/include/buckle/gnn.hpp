#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "buckle/graph.hpp"

namespace buckle {

inline constexpr int kNodeFeatures = 4;
inline constexpr int kEdgeFeatures = 2;
inline constexpr int kHidden = 64;
inline constexpr int kEmbed = 64;
inline constexpr int kLayers = 4;
inline constexpr int kClasses = 2;
inline constexpr int kReadout = kLayers * kEmbed;

using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One message-passing layer. Messages are
///   m_ij = W2^T lrelu(W1^T [h_j, x_j - x_i] + b1) + b2,
/// aggregated by element-wise max over neighbors (self included), then
/// batch-normalized and passed through Leaky ReLU.
struct LayerParams {
  Matrix w1;  // (in + 2) x kHidden
  RowVector b1;
  Matrix w2;  // kHidden x kEmbed
  RowVector b2;
  RowVector gamma;
  RowVector beta;
  RowVector running_mean;
  RowVector running_var;

  int input_dim() const { return static_cast<int>(w1.rows()) - kEdgeFeatures; }
};

struct ModelParams {
  std::array<LayerParams, kLayers> layers;
  Matrix classifier;  // kReadout x kClasses
  RowVector classifier_bias;
  std::uint64_t seed = 0;
  double slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t trainable_count() const;
};

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero
/// biases, unit BatchNorm scale, running variance 1.
ModelParams init_model(std::uint64_t seed);

/// Same shapes as `like` with every entry zero.
ModelParams zeros_like(const ModelParams& like);

/// Calls fn(group, data, size) for each trainable tensor in a fixed order.
void for_each_trainable(ModelParams& params,
                        const std::function<void(const std::string&, double*, Eigen::Index)>& fn);

/// Compact per-graph tensors: node features, positions and incoming
/// neighbor lists (ascending, self included).
struct GraphTensor {
  Matrix features;  // n x 4
  Matrix positions;  // n x 2
  std::vector<int> offsets;  // n + 1
  std::vector<int> neighbors;
  Label label = -1;

  int node_count() const { return static_cast<int>(features.rows()); }
};

GraphTensor to_tensor(const SpatialGraph& graph);

enum class Mode { Train, Eval };

struct Prediction {
  Eigen::Vector2d logits;
  Eigen::Vector2d probs;
  Label predicted = 0;  // argmax, ties to 0
};

/// Runs one layer on a single graph (h has one row per node).
Matrix pointnet_layer_forward(const GraphTensor& graph, const Matrix& h, const LayerParams& params,
                              Mode mode, double slope = 0.01, double bn_eps = 1e-5);

Prediction model_forward(const GraphTensor& graph, const ModelParams& params, Mode mode);
Prediction model_forward(const SpatialGraph& graph, const ModelParams& params, Mode mode);

/// Batch statistics from the last train-mode forward, used to update the
/// running BatchNorm estimates.
struct BatchStats {
  std::array<RowVector, kLayers> mean;
  std::array<RowVector, kLayers> var_unbiased;
};

struct LossResult {
  double loss = 0.0;
  ModelParams grads;
  std::vector<Prediction> predictions;
  BatchStats stats;
};

/// Mean cross-entropy of a train-mode forward over the batch and its exact
/// reverse-mode gradient. Max aggregation and max readout route the
/// gradient to the lowest-index maximizer.
LossResult loss_and_gradients(std::span<const GraphTensor* const> batch, const ModelParams& params,
                              std::int64_t batch_id = 0);

/// Loss only (train-mode statistics); the reference for finite-difference checks.
/// If `pattern` is given it receives a hash of every branch the forward took
/// (max winners and Leaky ReLU signs): parameter sets with equal hashes lie
/// on the same smooth piece of the loss.
double batch_loss(std::span<const GraphTensor* const> batch, const ModelParams& params,
                  std::uint64_t* pattern = nullptr);

void update_running_stats(ModelParams& params, const BatchStats& stats);

/// Replaces the running BatchNorm statistics with population statistics of
/// `graphs` under the current weights, one layer at a time, so that every
/// layer sees inputs normalized exactly as at inference. Works in chunks of
/// `chunk` graphs.
void recalibrate_batch_norm(ModelParams& params, std::span<const GraphTensor> graphs, int chunk = 32);

struct TrainConfig {
  int epochs = 50;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool shuffle = true;
  /// Graphs used to re-estimate BatchNorm statistics after every epoch (an
  /// even stride over the training set); 0 keeps the moving averages.
  int bn_recalibration = 1024;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelParams& like, const TrainConfig& cfg);
  void step(ModelParams& params, ModelParams& grads);
  long long step_count() const { return t_; }

 private:
  TrainConfig cfg_;
  ModelParams m_;
  ModelParams v_;
  long long t_ = 0;
};

/// Mini-batch Adam. Initialization, shuffling and tie-breaking are seeded by
/// cfg.seed; returns the final-epoch parameters.
TrainResult train(std::span<const GraphTensor> train_set, std::span<const GraphTensor> val_set,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

struct Evaluation {
  double accuracy = 0.0;
  std::vector<Prediction> predictions;
};

/// Eval-mode forward per graph; accuracy against each graph's label.
Evaluation evaluate(const ModelParams& params, std::span<const GraphTensor> dataset);

}  // namespace buckle
