#include "curvlayer/deformation.hpp"

#include <cmath>

#include "curvlayer/errors.hpp"
#include "curvlayer/parallel.hpp"

namespace curvlayer {

Mat3 quat_to_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

std::array<Mat3, 4> quat_to_matrix_jacobian(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Mat3, 4> J;
  J[0] << 0, -z, y,
          z, 0, -x,
          -y, x, 0;
  J[1] << 0, y, z,
          y, -2 * x, -w,
          z, w, -2 * x;
  J[2] << -2 * y, x, w,
          x, 0, z,
          -w, z, -2 * y;
  J[3] << -2 * z, -w, x,
          w, -2 * z, y,
          x, y, 0;
  for (auto& m : J) m *= 2.0;
  return J;
}

DeformationSystem::DeformationSystem(const CageMesh& cage, double gamma)
    : cage_(&cage), gamma_(gamma) {
  if (!(gamma > 0)) throw ConfigError("deformation gamma must be > 0");
  if (cage.centering.empty())
    throw ConfigError("cage must be finalized before building the solver");

  const int nv = cage.num_verts();
  // element block of A^T A is N itself (N symmetric idempotent)
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(cage.tets.size() * 16 + nv);
  for (const auto& t : cage.tets)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        trips.emplace_back(t[i], t[j], (i == j ? 1.0 : 0.0) - 0.25);
  for (int i = 0; i < nv; ++i) trips.emplace_back(i, i, gamma);

  Eigen::SparseMatrix<double> K(nv, nv);
  K.setFromTriplets(trips.begin(), trips.end());
  factor_.compute(K);
  if (factor_.info() != Eigen::Success)
    throw NumericalError("cage system factorization failed");

  grad_eps_ = 1e-8 * (cage.box.extent().z() / cage.mean_edge);
}

Eigen::MatrixXd DeformationSystem::rest_positions() const {
  Eigen::MatrixXd xi0(cage_->num_verts(), 3);
  for (int i = 0; i < cage_->num_verts(); ++i)
    xi0.row(i) = cage_->verts[i].transpose();
  return xi0;
}

DeformationSystem::State DeformationSystem::deform(
    const Eigen::MatrixXd& quat, const Eigen::MatrixXd& scale) const {
  const int nt = cage_->num_tets();
  if (quat.rows() != 4 || quat.cols() != nt || scale.rows() != 3 ||
      scale.cols() != nt)
    throw NumericalError("field shapes do not match the cage");

  State st;
  st.quat = quat;
  st.scale = scale;
  st.rot.resize(nt);

  Eigen::MatrixXd rhs = gamma_ * rest_positions();
  for (int e = 0; e < nt; ++e) {
    if (std::abs(quat.col(e).norm() - 1.0) > 1e-6)
      throw NumericalError("non-unit quaternion fed to deform");
    if (!(scale.col(e).minCoeff() > 0))
      throw NumericalError("non-positive scale fed to deform");
    st.rot[e] = quat_to_matrix(quat.col(e));
    // target rows: P_e S R^T
    Eigen::Matrix<double, 4, 3> B = cage_->centering[e] *
                                    scale.col(e).asDiagonal() *
                                    st.rot[e].transpose();
    const auto& t = cage_->tets[e];
    for (int i = 0; i < 4; ++i) rhs.row(t[i]) += B.row(i);
  }

  st.xi.resize(cage_->num_verts(), 3);
  for (int c = 0; c < 3; ++c) {
    st.xi.col(c) = factor_.solve(rhs.col(c));
    if (factor_.info() != Eigen::Success)
      throw NumericalError("cage solve failed");
  }
  // residual guard against the matrix action K x = A^T A x + gamma x, where
  // A^T A acts per element as "subtract the vertex mean"
  {
    double worst = 0;
    for (int c = 0; c < 3; ++c) {
      Eigen::VectorXd x = st.xi.col(c);
      Eigen::VectorXd Kx = gamma_ * x;
      for (int e = 0; e < nt; ++e) {
        const auto& t = cage_->tets[e];
        double mean = 0.25 * (x[t[0]] + x[t[1]] + x[t[2]] + x[t[3]]);
        for (int i = 0; i < 4; ++i) Kx[t[i]] += x[t[i]] - mean;
      }
      double denom = std::max(rhs.col(c).norm(), 1e-30);
      worst = std::max(worst, (Kx - rhs.col(c)).norm() / denom);
    }
    st.solve_residual = worst;
    if (!(worst <= 1e-8))
      throw NumericalError("cage solve residual " + std::to_string(worst) +
                           " exceeds 1e-8");
  }
  return st;
}

void DeformationSystem::backprop(const State& st, const Eigen::MatrixXd& dxi,
                                 Eigen::MatrixXd& dquat,
                                 Eigen::MatrixXd& dscale) const {
  const int nt = cage_->num_tets();
  // adjoint solve: K mu = dL/dxi, K symmetric
  Eigen::MatrixXd mu(cage_->num_verts(), 3);
  for (int c = 0; c < 3; ++c) {
    mu.col(c) = factor_.solve(dxi.col(c));
    if (factor_.info() != Eigen::Success)
      throw NumericalError("adjoint cage solve failed");
  }

  dquat.resize(4, nt);
  dscale.resize(3, nt);
  parallel_for(static_cast<std::size_t>(nt), [&](std::size_t ei) {
    int e = static_cast<int>(ei);
    const auto& t = cage_->tets[e];
    Eigen::Matrix<double, 4, 3> M;
    for (int i = 0; i < 4; ++i) M.row(i) = mu.row(t[i]);
    const auto& P = cage_->centering[e];
    const Mat3& R = st.rot[e];
    const Eigen::Vector3d s = st.scale.col(e);

    // rhs contribution is P S R^T; N is absorbed by P, so dL/dB = M works
    Mat3 dR = M.transpose() * P * s.asDiagonal();
    Mat3 PtMR = P.transpose() * M * R;
    dscale.col(e) = PtMR.diagonal();

    auto J = quat_to_matrix_jacobian(st.quat.col(e));
    for (int m = 0; m < 4; ++m)
      dquat(m, e) = (dR.array() * J[m].array()).sum();
  });
}

DeformationSystem::Directions DeformationSystem::print_directions(
    const State& st) const {
  const int nt = cage_->num_tets();
  Directions dirs;
  dirs.d.resize(3, nt);
  dirs.grad_norm.resize(nt);
  dirs.degenerate.assign(nt, 0);
  dirs.num_degenerate = 0;
  for (int e = 0; e < nt; ++e) {
    const auto& t = cage_->tets[e];
    Eigen::Vector4d z(st.xi(t[0], 2), st.xi(t[1], 2), st.xi(t[2], 2),
                      st.xi(t[3], 2));
    Vec3 g = cage_->shape_grads[e].transpose() * z;
    double n = g.norm();
    dirs.grad_norm[e] = n;
    if (n < grad_eps_) {
      dirs.d.col(e).setZero();
      dirs.degenerate[e] = 1;
      ++dirs.num_degenerate;
    } else {
      dirs.d.col(e) = g / n;
    }
  }
  return dirs;
}

void DeformationSystem::directions_backward(const State& st,
                                            const Directions& dirs,
                                            const Eigen::MatrixXd& dd,
                                            Eigen::MatrixXd& dxi) const {
  const int nt = cage_->num_tets();
  for (int e = 0; e < nt; ++e) {
    if (dirs.degenerate[e]) continue;
    Vec3 w = dd.col(e);
    if (w.isZero(0.0)) continue;
    Vec3 d = dirs.d.col(e);
    // d = g/|g|: pull back through the normalization
    Vec3 dg = (w - d * d.dot(w)) / dirs.grad_norm[e];
    Eigen::Vector4d dz = cage_->shape_grads[e] * dg;
    const auto& t = cage_->tets[e];
    for (int i = 0; i < 4; ++i) dxi(t[i], 2) += dz[i];
  }
}

}  // namespace curvlayer
