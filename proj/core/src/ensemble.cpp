#include "buckle/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <tuple>

#include "buckle/error.hpp"

namespace buckle {

Label hard_vote(std::span<const Label> labels) {
  if (labels.empty()) throw ArgumentError("hard_vote needs at least one model");
  std::size_t ones = 0;
  for (Label l : labels) {
    if (l != 0 && l != 1) throw ArgumentError("label must be 0 or 1");
    ones += l == 1 ? 1 : 0;
  }
  return 2 * ones > labels.size() ? 1 : 0;
}

std::pair<Eigen::Vector2d, Label> soft_vote(const Eigen::MatrixX2d& probs) {
  if (probs.rows() == 0) throw ArgumentError("soft_vote needs at least one model");
  for (Eigen::Index m = 0; m < probs.rows(); ++m) {
    const double s = probs(m, 0) + probs(m, 1);
    if (!(std::abs(s - 1.0) <= 1e-9) || probs(m, 0) < 0.0 || probs(m, 1) < 0.0) {
      throw ArgumentError("probability row " + std::to_string(m) + " does not sum to 1");
    }
  }
  Eigen::Vector2d mean = probs.colwise().mean().transpose();
  return {mean, mean[1] > mean[0] ? 1 : 0};
}

EnsemblePrediction ensemble_predict(const Eigen::MatrixX2d& member_probs) {
  EnsemblePrediction p;
  p.member_probs = member_probs;
  std::vector<Label> labels;
  for (Eigen::Index m = 0; m < member_probs.rows(); ++m) {
    labels.push_back(member_probs(m, 1) > member_probs(m, 0) ? 1 : 0);
  }
  p.hard_label = hard_vote(labels);
  std::tie(p.soft_probs, p.soft_label) = soft_vote(member_probs);
  return p;
}

CalibrationReport calibration_report(std::span<const double> probs_class1,
                                     std::span<const Label> labels, int bins) {
  if (bins < 2) throw ArgumentError("need at least 2 bins");
  if (probs_class1.empty()) throw ArgumentError("calibration needs at least one sample");
  if (probs_class1.size() != labels.size()) throw ArgumentError("probs and labels differ in length");

  CalibrationReport rep;
  rep.diagram.total = static_cast<int>(probs_class1.size());
  std::vector<double> conf_sum(bins, 0.0), pos(bins, 0.0);
  std::vector<int> count(bins, 0);
  for (std::size_t s = 0; s < probs_class1.size(); ++s) {
    const double p = probs_class1[s];
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("probability outside [0, 1]");
    const int k = std::min(bins - 1, static_cast<int>(std::floor(p * bins)));
    ++count[k];
    conf_sum[k] += p;
    pos[k] += labels[s] == 1 ? 1.0 : 0.0;
  }
  const double N = static_cast<double>(probs_class1.size());
  for (int k = 0; k < bins; ++k) {
    ReliabilityBin b;
    b.lo = static_cast<double>(k) / bins;
    b.hi = static_cast<double>(k + 1) / bins;
    b.n = count[k];
    if (b.n > 0) {
      b.mean_conf = conf_sum[k] / b.n;
      b.frac_class1 = pos[k] / b.n;
      const double gap = std::abs(b.frac_class1 - b.mean_conf);
      rep.ece += b.n / N * gap;
      rep.mce = std::max(rep.mce, gap);
    }
    rep.diagram.bins.push_back(b);
  }
  return rep;
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void write_reliability_csv(std::ostream& out, const ReliabilityDiagram& diagram) {
  out << "bin_lo,bin_hi,n,mean_conf,frac_class1\n";
  for (const auto& b : diagram.bins) {
    out << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.n << ',';
    if (!b.empty()) out << fmt(b.mean_conf) << ',' << fmt(b.frac_class1);
    else out << ',';
    out << '\n';
  }
}

std::string reliability_svg(const ReliabilityDiagram& diagram, const std::string& title) {
  const double W = 400, H = 400, pad = 40;
  const double side = W - 2 * pad;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H + 20
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << side << "\" height=\"" << side
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << pad + side << "\" x2=\"" << pad + side << "\" y2=\""
    << pad << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  for (const auto& b : diagram.bins) {
    if (b.empty()) continue;
    const double x = pad + b.lo * side;
    const double w = (b.hi - b.lo) * side;
    const double h = b.frac_class1 * side;
    s << "<rect x=\"" << x << "\" y=\"" << pad + side - h << "\" width=\"" << w << "\" height=\""
      << h << "\" fill=\"steelblue\" fill-opacity=\"0.7\" stroke=\"black\"/>\n";
    const double cy = pad + side - b.mean_conf * side;
    s << "<line x1=\"" << x << "\" y1=\"" << cy << "\" x2=\"" << x + w << "\" y2=\"" << cy
      << "\" stroke=\"crimson\" stroke-width=\"2\"/>\n";
  }
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 5 << "\" text-anchor=\"middle\">confidence (class 1)</text>\n";
  s << "<text x=\"12\" y=\"" << H / 2 << "\" transform=\"rotate(-90 12 " << H / 2
    << ")\" text-anchor=\"middle\">frequency (class 1)</text>\n";
  if (!title.empty()) {
    s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\">" << title << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

EnsembleReport ensemble_report(const std::vector<std::vector<Eigen::Vector2d>>& member_probs,
                               std::span<const Label> labels, int bins) {
  if (member_probs.empty()) throw ArgumentError("ensemble needs at least one model");
  const std::size_t N = labels.size();
  if (N == 0) throw ArgumentError("ensemble needs at least one sample");
  for (const auto& m : member_probs) {
    if (m.size() != N) throw ArgumentError("member prediction count differs from label count");
  }
  EnsembleReport rep;
  for (const auto& m : member_probs) {
    std::size_t correct = 0;
    for (std::size_t s = 0; s < N; ++s) correct += ((m[s][1] > m[s][0] ? 1 : 0) == labels[s]) ? 1 : 0;
    rep.member_accuracy.push_back(static_cast<double>(correct) / N);
  }
  double sum = 0.0;
  for (double a : rep.member_accuracy) sum += a;
  rep.mean_accuracy = sum / rep.member_accuracy.size();
  rep.best_accuracy = *std::max_element(rep.member_accuracy.begin(), rep.member_accuracy.end());

  const auto M = static_cast<Eigen::Index>(member_probs.size());
  std::size_t hard_ok = 0, soft_ok = 0;
  std::vector<double> conf(N);
  for (std::size_t s = 0; s < N; ++s) {
    Eigen::MatrixX2d rows(M, 2);
    for (Eigen::Index m = 0; m < M; ++m) rows.row(m) = member_probs[m][s].transpose();
    const EnsemblePrediction p = ensemble_predict(rows);
    hard_ok += p.hard_label == labels[s] ? 1 : 0;
    soft_ok += p.soft_label == labels[s] ? 1 : 0;
    conf[s] = std::clamp(p.soft_probs[1], 0.0, 1.0);
  }
  rep.hard_vote_accuracy = static_cast<double>(hard_ok) / N;
  rep.soft_vote_accuracy = static_cast<double>(soft_ok) / N;
  const CalibrationReport cal = calibration_report(conf, labels, bins);
  rep.ece = cal.ece;
  rep.mce = cal.mce;
  return rep;
}

}  // namespace buckle
