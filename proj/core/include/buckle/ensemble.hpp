#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "buckle/geometry.hpp"

namespace buckle {

/// Majority label; an exact tie goes to class 0.
Label hard_vote(std::span<const Label> labels);

/// Unweighted mean of M probability rows (M x 2) and its argmax (tie to 0).
/// Throws ArgumentError if a row does not sum to 1 within 1e-9.
std::pair<Eigen::Vector2d, Label> soft_vote(const Eigen::MatrixX2d& probs);

struct EnsemblePrediction {
  Eigen::MatrixX2d member_probs;
  Label hard_label = 0;
  Eigen::Vector2d soft_probs = Eigen::Vector2d::Zero();
  Label soft_label = 0;
};

EnsemblePrediction ensemble_predict(const Eigen::MatrixX2d& member_probs);

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  int n = 0;
  double mean_conf = 0.0;    // C_i
  double frac_class1 = 0.0;  // F_i
  bool empty() const { return n == 0; }
};

struct ReliabilityDiagram {
  std::vector<ReliabilityBin> bins;
  int total = 0;
};

struct CalibrationReport {
  double ece = 0.0;
  double mce = 0.0;
  ReliabilityDiagram diagram;
};

/// Bins class-1 confidence into B equal-width bins [k/B, (k+1)/B), the last
/// closed at 1. ECE weights each non-empty bin gap |F - C| by n/N; MCE is the
/// largest non-empty-bin gap.
CalibrationReport calibration_report(std::span<const double> probs_class1,
                                     std::span<const Label> labels, int bins = 10);

/// CSV with header "bin_lo,bin_hi,n,mean_conf,frac_class1"; empty bins have
/// empty mean_conf and frac_class1 fields.
void write_reliability_csv(std::ostream& out, const ReliabilityDiagram& diagram);
std::string reliability_svg(const ReliabilityDiagram& diagram, const std::string& title = "");

struct EnsembleReport {
  std::vector<double> member_accuracy;
  double mean_accuracy = 0.0;
  double best_accuracy = 0.0;
  double hard_vote_accuracy = 0.0;
  double soft_vote_accuracy = 0.0;
  double ece = 0.0;
  double mce = 0.0;
};

/// member_probs[m][s] holds model m's probabilities for sample s.
EnsembleReport ensemble_report(const std::vector<std::vector<Eigen::Vector2d>>& member_probs,
                               std::span<const Label> labels, int bins = 10);

}  // namespace buckle
