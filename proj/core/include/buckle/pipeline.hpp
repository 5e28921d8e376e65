#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "buckle/fea.hpp"
#include "buckle/geometry.hpp"
#include "buckle/gnn.hpp"
#include "buckle/graph.hpp"

namespace buckle {

enum class Voting { Hard, Soft, Both };
std::string to_string(Voting voting);
Voting parse_voting(const std::string& text);

enum class Stage { Generate, Simulate, Graphify, Train, Evaluate, Ensemble, Calibrate, Pipeline };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct PipelineConfig {
  SubDataset sub_dataset = SubDataset::Sub1;
  int train_count = 2000;
  int val_count = 250;
  int test_count = 250;
  /// FEA raster; 0 selects the per-kind default.
  int raster_rows = 0;
  int raster_cols = 0;
  int graph_rows = 800;
  int graph_cols = 100;
  double youngs_modulus = 1.0;
  double poisson_ratio = 0.3;
  SolverConfig solver;
  GraphMethod method = GraphMethod::Ball;
  Density density = Density::Medium;
  double radius = 0.4;  // in units of the width
  double compactness = 10.0;
  TrainConfig train;
  int num_seeds = 10;
  Voting voting = Voting::Both;
  int calibration_bins = 10;
  bool augment = false;
  std::string output_dir = "buckle_out";
  std::uint64_t master_seed = 0;

  /// Best density/radius settings for each sub-dataset: Sub1 medium / 0.4 w,
  /// Sub2 and Sub3 dense / 0.3 w.
  static PipelineConfig defaults_for(SubDataset kind);

  std::pair<int, int> fea_raster() const;
  void validate() const;  // throws ConfigError
};

/// Missing keys take defaults_for(sub_dataset); unknown keys are rejected.
PipelineConfig config_from_json(const std::string& text);
std::string config_to_json(const PipelineConfig& cfg);

/// FNV-1a 64 of the canonical JSON of the settings a stage depends on,
/// chained through all upstream stages. Hex encoded.
std::string stage_digest(const PipelineConfig& cfg, Stage stage);

/// Thread count from BUCKLE_THREADS (default: hardware concurrency, at least 1).
int worker_threads();

/// Runs fn(i) for i in [0, n) on `threads` workers. Results must be written
/// by index; the exception of the lowest failing index is rethrown.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

using LogFn = std::function<void(const std::string&)>;

/// Runs one stage (or all of them for Stage::Pipeline) inside
/// cfg.output_dir. Throws ConfigError, UpstreamError, NumericalError and the
/// module errors.
void run_stage(Stage stage, const PipelineConfig& cfg, const LogFn& log = {});

}  // namespace buckle
