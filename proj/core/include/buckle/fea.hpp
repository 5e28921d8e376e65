#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "buckle/error.hpp"
#include "buckle/geometry.hpp"

namespace buckle {

struct MaterialModel {
  double E = 1.0;
  double nu = 0.3;
  double lambda = 0.0;
  double mu = 0.0;
};

/// lambda = E nu / ((1 + nu)(1 - 2 nu)), mu = E / (2 (1 + nu)). Requires E > 0, 0 <= nu < 0.5.
MaterialModel lame_parameters(double E, double nu);

/// Compressible Neo-Hookean energy density
///   psi = mu/2 [F:F - 3 - 2 ln J] + lambda/2 [(J^2 - 1)/2 - ln J].
/// Throws NumericalError when det F <= 0.
double strain_energy_density(const Eigen::Matrix3d& F, const MaterialModel& m);

/// First Piola-Kirchhoff stress dpsi/dF.
Eigen::Matrix3d first_piola(const Eigen::Matrix3d& F, const MaterialModel& m);

/// Plane-strain response for an in-plane gradient (F33 = 1). The tangent is
/// indexed A(2*i + J, 2*k + L) = d P_iJ / d F_kL.
struct PlaneStrainResponse {
  double psi = 0.0;
  Eigen::Matrix2d P;
  Eigen::Matrix4d A;
};
PlaneStrainResponse plane_strain_response(const Eigen::Matrix2d& F, const MaterialModel& m,
                                          bool with_tangent = true);

/// One bilinear quad per occupied cell. Nodes sit on the cell-corner lattice;
/// element connectivity is counterclockwise starting bottom-left.
struct PixelMesh {
  double cell = 0.0;    // element side length
  double width = 1.0;   // domain width w
  double length = 8.0;  // domain length L
  std::vector<Eigen::Vector2d> nodes;
  std::vector<std::array<int, 4>> elements;
  std::vector<int> bottom_nodes;
  std::vector<int> top_nodes;

  int dof_count() const { return 2 * static_cast<int>(nodes.size()); }
};

/// Throws PreconditionError unless connectivity_check(bitmap) holds.
PixelMesh build_pixel_mesh(const Bitmap& bitmap, double width = 1.0, double length = 8.0);

/// Total stored energy, internal force and tangent of a mesh for a nodal
/// displacement vector laid out as [u_x0, u_y0, u_x1, ...]. Element integrals
/// use 2x2 Gauss quadrature and unit out-of-plane thickness.
class HyperelasticAssembler {
 public:
  HyperelasticAssembler(const PixelMesh& mesh, const MaterialModel& material);

  double energy(const Eigen::VectorXd& u) const;
  Eigen::VectorXd internal_force(const Eigen::VectorXd& u) const;
  Eigen::SparseMatrix<double> tangent(const Eigen::VectorXd& u) const;

  /// Energy of the elements touching node `node` only; differences of this
  /// quantity equal differences of the total energy when only that node moves.
  double local_energy(const Eigen::VectorXd& u, int node) const;

  const PixelMesh& mesh() const { return mesh_; }
  const MaterialModel& material() const { return material_; }

  /// Element kernel. Writes the 8-vector of nodal forces and, if ke is
  /// non-null, the 8x8 stiffness. Returns the element energy; throws
  /// NumericalError on an inverted Gauss point.
  double element(int e, const Eigen::VectorXd& u, Eigen::Matrix<double, 8, 1>& fe,
                 Eigen::Matrix<double, 8, 8>* ke) const;

 private:
  const PixelMesh& mesh_;
  MaterialModel material_;
  std::array<Eigen::Matrix<double, 4, 2>, 4> grad_;  // dN/dX per Gauss point
  double weight_ = 0.0;                             // det(J) * Gauss weight
  std::vector<std::vector<int>> node_elements_;
};

struct SolverConfig {
  double increment = 2.5e-4;  ///< top displacement per step, as a fraction of L
  double stop_ratio = 0.15;   ///< stop once max |u_x| >= stop_ratio * w
  double newton_rel_tol = 1e-8;
  int newton_max_iter = 25;
  int max_step_halvings = 8;
  double max_compression = 0.2;  ///< give up (no symmetry breaking) past this fraction of L
  bool stop_at_instability = false;
};

struct StepRecord {
  double applied = 0.0;   // top displacement magnitude
  double reaction = 0.0;  // total vertical reaction at the top
  double max_abs_ux = 0.0;
  int negative_pivots = 0;
  int newton_iterations = 0;
};

struct SimResult {
  Label label = 0;
  double max_ux = 0.0;
  double min_ux = 0.0;
  int steps = 0;
  std::vector<std::pair<double, double>> centerline;  // (y, u_x), ascending y
  double disp_range = 0.0;
  double width = 1.0;
  double length = 8.0;
  /// First applied compressive strain at which the tangent lost positive
  /// definiteness, if it did before termination.
  std::optional<double> critical_strain;
  std::vector<StepRecord> history;
  Eigen::VectorXd displacement;
  bool terminated = false;  // stop criterion reached
};

/// Raised when step halving is exhausted or an element inverts; carries the
/// last converged state.
class SolverFailure : public NumericalError {
 public:
  SolverFailure(const std::string& what, SimResult last)
      : NumericalError(what), last_(std::move(last)) {}
  const SimResult& last_converged() const { return last_; }

 private:
  SimResult last_;
};

/// Displacement-controlled compression. Bottom nodes are clamped; top nodes
/// have u_x = 0 and u_y = -step * increment * L. Runs until max |u_x| >=
/// stop_ratio * w and labels the result with classify_direction. Throws
/// AmbiguousSampleError if the compression cap is reached or the extremes tie.
SimResult solve_compression(const PixelMesh& mesh, const MaterialModel& material,
                            const SolverConfig& cfg = {});

/// 0 (left) iff |max_ux| < |min_ux|; an exact tie throws AmbiguousSampleError.
Label classify_direction(double max_ux, double min_ux);

/// (max_ux - min_ux) / w, and u_x along the nodes nearest x = w/2 ordered by y.
std::pair<double, std::vector<std::pair<double, double>>> deflection_diagnostics(
    const SimResult& result, const PixelMesh& mesh);

std::string sim_result_to_json(const SimResult& result, const std::string& id);
void write_centerline_csv(std::ostream& out, const SimResult& result);

}  // namespace buckle
