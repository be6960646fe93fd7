#pragma once
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <vector>

#include "curvlayer/cage.hpp"
#include "curvlayer/geometry.hpp"

namespace curvlayer {

// Least-squares cage deformation: find vertex positions xi minimizing
//   sum_e || centered(xi_e) - R_e S_e centered(rest_e) ||_F^2
//   + gamma ||xi - rest||^2
// for per-element rotations R_e (from unit quaternions) and axis scales S_e.
// The normal matrix folds to one scalar SPD system K = A^T A + gamma I shared
// by the x, y and z coordinates; K is factorized once per cage.
class DeformationSystem {
 public:
  DeformationSystem(const CageMesh& cage, double gamma);

  struct State {
    Eigen::MatrixXd xi;     // num_verts x 3 deformed positions
    Eigen::MatrixXd quat;   // 4 x num_tets unit quaternions (as given)
    Eigen::MatrixXd scale;  // 3 x num_tets axis scales
    std::vector<Mat3> rot;  // rotation per element
    double solve_residual;  // worst relative residual of the three solves
  };

  // quat columns must be unit; scale entries positive.
  State deform(const Eigen::MatrixXd& quat, const Eigen::MatrixXd& scale) const;

  // Chain rule through the solve: dL/dxi -> dL/dquat, dL/dscale (overwritten).
  // Costs three more backsolves with the cached factorization.
  void backprop(const State& st, const Eigen::MatrixXd& dxi,
                Eigen::MatrixXd& dquat, Eigen::MatrixXd& dscale) const;

  // Per-element print direction: normalized gradient of G(x) = interpolated
  // deformed z over the rest element. Degenerate elements (|grad| below the
  // epsilon) get a zero direction and are flagged.
  struct Directions {
    Eigen::MatrixXd d;  // 3 x num_tets
    std::vector<double> grad_norm;
    std::vector<uint8_t> degenerate;
    int num_degenerate = 0;
  };
  Directions print_directions(const State& st) const;

  // Adds the pullback of dL/dd into the z column of dxi.
  void directions_backward(const State& st, const Directions& dirs,
                           const Eigen::MatrixXd& dd,
                           Eigen::MatrixXd& dxi) const;

  const CageMesh& cage() const { return *cage_; }
  double gamma() const { return gamma_; }
  double grad_epsilon() const { return grad_eps_; }
  Eigen::MatrixXd rest_positions() const;

 private:
  const CageMesh* cage_;
  double gamma_;
  double grad_eps_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> factor_;
};

// Rotation matrix of a unit quaternion (w, x, y, z).
Mat3 quat_to_matrix(const Eigen::Vector4d& q);
// Partial derivatives of the rotation entries in the quaternion components.
std::array<Mat3, 4> quat_to_matrix_jacobian(const Eigen::Vector4d& q);

}  // namespace curvlayer
