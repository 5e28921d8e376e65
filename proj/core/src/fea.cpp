#include "buckle/fea.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include <Eigen/LU>
#include <Eigen/SparseCholesky>
#include <json.hpp>

namespace buckle {

MaterialModel lame_parameters(double E, double nu) {
  if (!(E > 0.0) || !(nu >= 0.0) || !(nu < 0.5)) {
    throw ArgumentError("material requires E > 0 and 0 <= nu < 0.5 (incompressible limit unsupported)");
  }
  MaterialModel m;
  m.E = E;
  m.nu = nu;
  m.lambda = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
  m.mu = E / (2.0 * (1.0 + nu));
  return m;
}

double strain_energy_density(const Eigen::Matrix3d& F, const MaterialModel& m) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw NumericalError("inverted deformation gradient (det F <= 0)");
  const double lnJ = std::log(J);
  return 0.5 * m.mu * (F.squaredNorm() - 3.0 - 2.0 * lnJ) +
         0.5 * m.lambda * (0.5 * (J * J - 1.0) - lnJ);
}

Eigen::Matrix3d first_piola(const Eigen::Matrix3d& F, const MaterialModel& m) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw NumericalError("inverted deformation gradient (det F <= 0)");
  const Eigen::Matrix3d FinvT = F.inverse().transpose();
  return m.mu * (F - FinvT) + 0.5 * m.lambda * (J * J - 1.0) * FinvT;
}

PlaneStrainResponse plane_strain_response(const Eigen::Matrix2d& F, const MaterialModel& m,
                                          bool with_tangent) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw NumericalError("inverted element (det F <= 0)");
  const double lnJ = std::log(J);
  const Eigen::Matrix2d Finv = F.inverse();
  const Eigen::Matrix2d FinvT = Finv.transpose();
  const double vol = 0.5 * m.lambda * (J * J - 1.0);

  PlaneStrainResponse out;
  // F33 = 1 contributes 1 to F:F.
  out.psi = 0.5 * m.mu * (F.squaredNorm() + 1.0 - 3.0 - 2.0 * lnJ) +
            0.5 * m.lambda * (0.5 * (J * J - 1.0) - lnJ);
  out.P = m.mu * (F - FinvT) + vol * FinvT;
  if (with_tangent) {
    const double c1 = m.mu - vol;
    const double c2 = m.lambda * J * J;
    for (int i = 0; i < 2; ++i)
      for (int Jc = 0; Jc < 2; ++Jc)
        for (int k = 0; k < 2; ++k)
          for (int Lc = 0; Lc < 2; ++Lc) {
            double a = c1 * Finv(Jc, k) * Finv(Lc, i) + c2 * Finv(Jc, i) * Finv(Lc, k);
            if (i == k && Jc == Lc) a += m.mu;
            out.A(2 * i + Jc, 2 * k + Lc) = a;
          }
  } else {
    out.A.setZero();
  }
  return out;
}

PixelMesh build_pixel_mesh(const Bitmap& bitmap, double width, double length) {
  if (!connectivity_check(bitmap)) {
    throw PreconditionError("bitmap is not a single connected component spanning both ends");
  }
  const int R = bitmap.rows;
  const int C = bitmap.cols;
  PixelMesh mesh;
  mesh.cell = width / C;
  mesh.width = width;
  mesh.length = length;

  // Lattice row i counts from the bottom (y = i * cell).
  auto cell_occupied = [&](int i, int c) {
    return i >= 0 && i < R && c >= 0 && c < C && bitmap.at(R - 1 - i, c);
  };
  std::vector<int> node_id(static_cast<std::size_t>(R + 1) * (C + 1), -1);
  for (int i = 0; i <= R; ++i) {
    for (int j = 0; j <= C; ++j) {
      const bool used = cell_occupied(i, j) || cell_occupied(i, j - 1) ||
                        cell_occupied(i - 1, j) || cell_occupied(i - 1, j - 1);
      if (!used) continue;
      node_id[static_cast<std::size_t>(i) * (C + 1) + j] = static_cast<int>(mesh.nodes.size());
      mesh.nodes.emplace_back(j * mesh.cell, i * mesh.cell);
      if (i == 0) mesh.bottom_nodes.push_back(static_cast<int>(mesh.nodes.size()) - 1);
      if (i == R) mesh.top_nodes.push_back(static_cast<int>(mesh.nodes.size()) - 1);
    }
  }
  auto id = [&](int i, int j) { return node_id[static_cast<std::size_t>(i) * (C + 1) + j]; };
  for (int i = 0; i < R; ++i) {
    for (int c = 0; c < C; ++c) {
      if (!cell_occupied(i, c)) continue;
      mesh.elements.push_back({id(i, c), id(i, c + 1), id(i + 1, c + 1), id(i + 1, c)});
    }
  }
  return mesh;
}

HyperelasticAssembler::HyperelasticAssembler(const PixelMesh& mesh, const MaterialModel& material)
    : mesh_(mesh), material_(material) {
  const double g = 1.0 / std::sqrt(3.0);
  const double xi_a[4] = {-1, 1, 1, -1};
  const double eta_a[4] = {-1, -1, 1, 1};
  const double gp[4][2] = {{-g, -g}, {g, -g}, {g, g}, {-g, g}};
  const double scale = 2.0 / mesh.cell;
  for (int q = 0; q < 4; ++q) {
    for (int a = 0; a < 4; ++a) {
      grad_[q](a, 0) = 0.25 * xi_a[a] * (1.0 + eta_a[a] * gp[q][1]) * scale;
      grad_[q](a, 1) = 0.25 * eta_a[a] * (1.0 + xi_a[a] * gp[q][0]) * scale;
    }
  }
  weight_ = 0.25 * mesh.cell * mesh.cell;
  node_elements_.resize(mesh.nodes.size());
  for (int e = 0; e < static_cast<int>(mesh.elements.size()); ++e) {
    for (int n : mesh.elements[e]) node_elements_[n].push_back(e);
  }
}

double HyperelasticAssembler::element(int e, const Eigen::VectorXd& u,
                                      Eigen::Matrix<double, 8, 1>& fe,
                                      Eigen::Matrix<double, 8, 8>* ke) const {
  const auto& conn = mesh_.elements[e];
  Eigen::Matrix<double, 4, 2> ue;
  for (int a = 0; a < 4; ++a) {
    ue(a, 0) = u[2 * conn[a]];
    ue(a, 1) = u[2 * conn[a] + 1];
  }
  fe.setZero();
  if (ke) ke->setZero();
  double energy = 0.0;
  for (int q = 0; q < 4; ++q) {
    const auto& G = grad_[q];
    const Eigen::Matrix2d F = Eigen::Matrix2d::Identity() + ue.transpose() * G;
    const PlaneStrainResponse resp = plane_strain_response(F, material_, ke != nullptr);
    energy += resp.psi * weight_;
    for (int a = 0; a < 4; ++a) {
      for (int i = 0; i < 2; ++i) {
        fe(2 * a + i) += (resp.P(i, 0) * G(a, 0) + resp.P(i, 1) * G(a, 1)) * weight_;
      }
    }
    if (ke) {
      // B(iJ, 2b+k) = dN_b/dX_J delta_ik, so K = B^T A B.
      Eigen::Matrix<double, 4, 8> B = Eigen::Matrix<double, 4, 8>::Zero();
      for (int b = 0; b < 4; ++b) {
        for (int k = 0; k < 2; ++k) {
          B(2 * k + 0, 2 * b + k) = G(b, 0);
          B(2 * k + 1, 2 * b + k) = G(b, 1);
        }
      }
      ke->noalias() += B.transpose() * resp.A * B * weight_;
    }
  }
  return energy;
}

double HyperelasticAssembler::energy(const Eigen::VectorXd& u) const {
  double total = 0.0;
  Eigen::Matrix<double, 8, 1> fe;
  for (int e = 0; e < static_cast<int>(mesh_.elements.size()); ++e) total += element(e, u, fe, nullptr);
  return total;
}

double HyperelasticAssembler::local_energy(const Eigen::VectorXd& u, int node) const {
  double total = 0.0;
  Eigen::Matrix<double, 8, 1> fe;
  for (int e : node_elements_[node]) total += element(e, u, fe, nullptr);
  return total;
}

Eigen::VectorXd HyperelasticAssembler::internal_force(const Eigen::VectorXd& u) const {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(mesh_.dof_count());
  Eigen::Matrix<double, 8, 1> fe;
  for (int e = 0; e < static_cast<int>(mesh_.elements.size()); ++e) {
    element(e, u, fe, nullptr);
    const auto& conn = mesh_.elements[e];
    for (int a = 0; a < 4; ++a) {
      f[2 * conn[a]] += fe(2 * a);
      f[2 * conn[a] + 1] += fe(2 * a + 1);
    }
  }
  return f;
}

Eigen::SparseMatrix<double> HyperelasticAssembler::tangent(const Eigen::VectorXd& u) const {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(mesh_.elements.size() * 64);
  Eigen::Matrix<double, 8, 1> fe;
  Eigen::Matrix<double, 8, 8> ke;
  for (int e = 0; e < static_cast<int>(mesh_.elements.size()); ++e) {
    element(e, u, fe, &ke);
    const auto& conn = mesh_.elements[e];
    for (int p = 0; p < 8; ++p)
      for (int q = 0; q < 8; ++q)
        trip.emplace_back(2 * conn[p / 2] + p % 2, 2 * conn[q / 2] + q % 2, ke(p, q));
  }
  Eigen::SparseMatrix<double> K(mesh_.dof_count(), mesh_.dof_count());
  K.setFromTriplets(trip.begin(), trip.end());
  return K;
}

Label classify_direction(double max_ux, double min_ux) {
  const double a = std::abs(max_ux);
  const double b = std::abs(min_ux);
  if (a == b) throw AmbiguousSampleError("|max u_x| == |min u_x|: no preferred buckling direction");
  return a < b ? 0 : 1;
}

std::pair<double, std::vector<std::pair<double, double>>> deflection_diagnostics(
    const SimResult& result, const PixelMesh& mesh) {
  const double range = (result.max_ux - result.min_ux) / mesh.width;
  std::vector<std::pair<double, double>> line;
  // For each lattice row, the node closest to the axis x = w/2.
  const double axis = 0.5 * mesh.width;
  std::vector<int> best;
  std::vector<double> best_dist;
  const int rows = static_cast<int>(std::lround(mesh.length / mesh.cell)) + 1;
  best.assign(static_cast<std::size_t>(rows), -1);
  best_dist.assign(static_cast<std::size_t>(rows), std::numeric_limits<double>::infinity());
  for (int n = 0; n < static_cast<int>(mesh.nodes.size()); ++n) {
    const int i = static_cast<int>(std::lround(mesh.nodes[n].y() / mesh.cell));
    const double d = std::abs(mesh.nodes[n].x() - axis);
    if (d < best_dist[i]) {
      best_dist[i] = d;
      best[i] = n;
    }
  }
  for (int i = 0; i < rows; ++i) {
    if (best[i] < 0) continue;
    const double ux = result.displacement.size() > 2 * best[i] ? result.displacement[2 * best[i]] : 0.0;
    line.emplace_back(mesh.nodes[best[i]].y(), ux);
  }
  return {range, std::move(line)};
}

namespace {

struct FreeSystem {
  std::vector<int> free_of_dof;  // -1 when constrained
  int free_count = 0;
  Eigen::SparseMatrix<double> K;
  std::vector<std::array<int, 64>> slots;  // value index per element entry, -1 if constrained
};

FreeSystem build_free_system(const PixelMesh& mesh) {
  FreeSystem sys;
  const int ndof = mesh.dof_count();
  std::vector<char> fixed(static_cast<std::size_t>(ndof), 0);
  for (int n : mesh.bottom_nodes) fixed[2 * n] = fixed[2 * n + 1] = 1;
  for (int n : mesh.top_nodes) fixed[2 * n] = fixed[2 * n + 1] = 1;
  sys.free_of_dof.assign(static_cast<std::size_t>(ndof), -1);
  for (int d = 0; d < ndof; ++d) {
    if (!fixed[d]) sys.free_of_dof[d] = sys.free_count++;
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(mesh.elements.size() * 64);
  for (const auto& conn : mesh.elements) {
    for (int p = 0; p < 8; ++p) {
      const int fp = sys.free_of_dof[2 * conn[p / 2] + p % 2];
      if (fp < 0) continue;
      for (int q = 0; q < 8; ++q) {
        const int fq = sys.free_of_dof[2 * conn[q / 2] + q % 2];
        if (fq >= 0) trip.emplace_back(fp, fq, 0.0);
      }
    }
  }
  sys.K.resize(sys.free_count, sys.free_count);
  sys.K.setFromTriplets(trip.begin(), trip.end());
  sys.K.makeCompressed();

  const int* outer = sys.K.outerIndexPtr();
  const int* inner = sys.K.innerIndexPtr();
  sys.slots.resize(mesh.elements.size());
  for (std::size_t e = 0; e < mesh.elements.size(); ++e) {
    const auto& conn = mesh.elements[e];
    for (int p = 0; p < 8; ++p) {
      const int fp = sys.free_of_dof[2 * conn[p / 2] + p % 2];
      for (int q = 0; q < 8; ++q) {
        const int fq = sys.free_of_dof[2 * conn[q / 2] + q % 2];
        int slot = -1;
        if (fp >= 0 && fq >= 0) {
          const int* lo = inner + outer[fq];
          const int* hi = inner + outer[fq + 1];
          slot = static_cast<int>(std::lower_bound(lo, hi, fp) - inner);
        }
        sys.slots[e][p * 8 + q] = slot;
      }
    }
  }
  return sys;
}

struct Assembled {
  Eigen::VectorXd residual;  // free dofs
  double reaction_norm = 0.0;
  double top_reaction = 0.0;
};

Assembled assemble_free(const HyperelasticAssembler& asmb, FreeSystem& sys,
                        const Eigen::VectorXd& u, const std::vector<char>& is_top_y) {
  const PixelMesh& mesh = asmb.mesh();
  Assembled out;
  out.residual = Eigen::VectorXd::Zero(sys.free_count);
  Eigen::VectorXd constrained = Eigen::VectorXd::Zero(mesh.dof_count());
  std::fill(sys.K.valuePtr(), sys.K.valuePtr() + sys.K.nonZeros(), 0.0);
  double* values = sys.K.valuePtr();
  Eigen::Matrix<double, 8, 1> fe;
  Eigen::Matrix<double, 8, 8> ke;
  for (int e = 0; e < static_cast<int>(mesh.elements.size()); ++e) {
    asmb.element(e, u, fe, &ke);
    const auto& conn = mesh.elements[e];
    const auto& slot = sys.slots[e];
    for (int p = 0; p < 8; ++p) {
      const int dof = 2 * conn[p / 2] + p % 2;
      const int fp = sys.free_of_dof[dof];
      if (fp < 0) {
        constrained[dof] += fe(p);
        continue;
      }
      out.residual[fp] += fe(p);
      for (int q = 0; q < 8; ++q) {
        const int s = slot[p * 8 + q];
        if (s >= 0) values[s] += ke(p, q);
      }
    }
  }
  out.reaction_norm = constrained.norm();
  for (int d = 0; d < mesh.dof_count(); ++d) {
    if (is_top_y[d]) out.top_reaction += constrained[d];
  }
  return out;
}

std::pair<double, double> lateral_extremes(const Eigen::VectorXd& u) {
  double mx = -std::numeric_limits<double>::infinity();
  double mn = std::numeric_limits<double>::infinity();
  for (Eigen::Index d = 0; d < u.size(); d += 2) {
    mx = std::max(mx, u[d]);
    mn = std::min(mn, u[d]);
  }
  return {mx, mn};
}

}  // namespace

SimResult solve_compression(const PixelMesh& mesh, const MaterialModel& material,
                            const SolverConfig& cfg) {
  if (!(cfg.increment > 0.0) || !(cfg.stop_ratio > 0.0) || !(cfg.newton_rel_tol > 0.0) ||
      cfg.newton_max_iter < 1 || cfg.max_step_halvings < 0 || !(cfg.max_compression > 0.0)) {
    throw ArgumentError("invalid solver config");
  }
  if (mesh.elements.empty() || mesh.bottom_nodes.empty() || mesh.top_nodes.empty()) {
    throw PreconditionError("mesh has no elements or no boundary nodes");
  }
  const HyperelasticAssembler asmb(mesh, material);
  FreeSystem sys = build_free_system(mesh);
  std::vector<char> is_top_y(static_cast<std::size_t>(mesh.dof_count()), 0);
  for (int n : mesh.top_nodes) is_top_y[2 * n + 1] = 1;

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  ldlt.analyzePattern(sys.K);

  const double L = mesh.length;
  const double w = mesh.width;
  const double nominal = cfg.increment * L;
  const double floor = 1e-12 * material.E * w;

  SimResult result;
  result.width = w;
  result.length = L;
  result.displacement = Eigen::VectorXd::Zero(mesh.dof_count());

  Eigen::VectorXd u = result.displacement;
  Eigen::VectorXd last_delta;  // free-dof change over the previous accepted step
  double last_inc = 0.0;
  double applied = 0.0;
  double inc = nominal;
  int halvings = 0;
  int negative_pivots = 0;

  auto set_top = [&](Eigen::VectorXd& v, double d) {
    for (int n : mesh.top_nodes) {
      v[2 * n] = 0.0;
      v[2 * n + 1] = -d;
    }
  };

  while (true) {
    if (applied >= cfg.max_compression * L) {
      throw AmbiguousSampleError("no symmetry breaking before compression cap of " +
                                 std::to_string(cfg.max_compression) + " L");
    }
    const double target = applied + inc;
    Eigen::VectorXd trial = u;
    set_top(trial, target);
    if (last_delta.size() > 0) {
      const double s = inc / last_inc;
      for (int d = 0; d < mesh.dof_count(); ++d) {
        const int f = sys.free_of_dof[d];
        if (f >= 0) trial[d] += s * last_delta[f];
      }
    }

    bool converged = false;
    int iterations = 0;
    Assembled state;
    try {
      for (int it = 0; it <= cfg.newton_max_iter; ++it) {
        state = assemble_free(asmb, sys, trial, is_top_y);
        const double rnorm = state.residual.norm();
        if (!std::isfinite(rnorm)) break;
        if (it > 0 && rnorm <= cfg.newton_rel_tol * std::max(state.reaction_norm, floor)) {
          converged = true;
          break;
        }
        if (it == cfg.newton_max_iter) break;
        ldlt.factorize(sys.K);
        if (ldlt.info() != Eigen::Success) break;
        const Eigen::VectorXd du = ldlt.solve(-state.residual);
        int neg = 0;
        const auto& D = ldlt.vectorD();
        for (Eigen::Index k = 0; k < D.size(); ++k) neg += D[k] < 0.0;
        negative_pivots = neg;
        for (int d = 0; d < mesh.dof_count(); ++d) {
          const int f = sys.free_of_dof[d];
          if (f >= 0) trial[d] += du[f];
        }
        ++iterations;
      }
    } catch (const NumericalError&) {
      converged = false;
    }

    if (!converged) {
      if (++halvings > cfg.max_step_halvings) {
        result.displacement = u;
        throw SolverFailure("Newton failed after " + std::to_string(cfg.max_step_halvings) +
                                " step halvings at applied displacement " + std::to_string(applied),
                            std::move(result));
      }
      inc *= 0.5;
      continue;
    }

    Eigen::VectorXd delta(sys.free_count);
    for (int d = 0; d < mesh.dof_count(); ++d) {
      const int f = sys.free_of_dof[d];
      if (f >= 0) delta[f] = trial[d] - u[d];
    }
    last_delta = std::move(delta);
    last_inc = inc;
    u = std::move(trial);
    applied = target;
    halvings = 0;
    inc = std::min(nominal, 2.0 * inc);
    ++result.steps;

    const auto [mx, mn] = lateral_extremes(u);
    StepRecord rec;
    rec.applied = applied;
    rec.reaction = -state.top_reaction;
    rec.max_abs_ux = std::max(std::abs(mx), std::abs(mn));
    rec.negative_pivots = negative_pivots;
    rec.newton_iterations = iterations;
    result.history.push_back(rec);
    result.max_ux = mx;
    result.min_ux = mn;
    result.displacement = u;

    if (negative_pivots > 0 && !result.critical_strain) {
      result.critical_strain = applied / L;
      if (cfg.stop_at_instability) break;
    }
    if (rec.max_abs_ux >= cfg.stop_ratio * w) {
      result.terminated = true;
      break;
    }
  }

  auto [range, line] = deflection_diagnostics(result, mesh);
  result.disp_range = range;
  result.centerline = std::move(line);
  if (result.terminated) result.label = classify_direction(result.max_ux, result.min_ux);
  return result;
}

std::string sim_result_to_json(const SimResult& result, const std::string& id) {
  nlohmann::json j = {{"id", id},
                      {"label", result.label},
                      {"max_ux", result.max_ux},
                      {"min_ux", result.min_ux},
                      {"steps", result.steps},
                      {"disp_range", result.disp_range}};
  if (result.critical_strain) j["critical_strain"] = *result.critical_strain;
  return j.dump();
}

void write_centerline_csv(std::ostream& out, const SimResult& result) {
  out << "y,u_x\n";
  char buf[64];
  for (const auto& [y, ux] : result.centerline) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", y, ux);
    out << buf;
  }
}

}  // namespace buckle
