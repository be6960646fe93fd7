#pragma once
#include <cmath>
#include <vector>

#include "curvlayer/cage.hpp"
#include "curvlayer/deformation.hpp"
#include "curvlayer/geometry.hpp"

namespace curvlayer {

// Boundary sample: a surface patch with outward unit normal, its area as the
// weight, the cage element containing it, and nearest-neighbor sample ids.
struct SurfaceSample {
  Vec3 p = Vec3::Zero();
  Vec3 n = Vec3::Zero();
  double area = 0;
  int element = -1;
  std::vector<int> nbrs;
  bool excluded = false;
};

// Interior sample on the critical-stress region: unit principal stress
// direction tau, voxel volume as the weight.
struct StressSample {
  Vec3 p = Vec3::Zero();
  Vec3 tau = Vec3::Zero();
  double volume = 0;
  int element = -1;
};

struct LossParams {
  double alpha = 45.0 * M_PI / 180.0;  // support-free facing threshold
  double beta = 10.0 * M_PI / 180.0;   // reinforcement deviation allowance
  double k_sf = 30.0;                  // sigmoid sharpness, facing term
  double k_sr = 15.0;                  // sigmoid sharpness, reinforcement term
  double phi = 90.0 * M_PI / 180.0;    // nozzle clearance angle
  double w_sf = 1.0;
  double w_po = 1.0;
  double w_harmonic = 1.0;
};

struct LossTerms {
  double sr = 0, sf = 0, po = 0, ca = 0, hs = 0, hq = 0;
  int skipped_pairs = 0;        // clearance pairs with a degenerate hinge
  int degenerate_elements = 0;  // samples on zero-gradient elements
  // soft objective; the clearance term is driven to zero separately
  double objective(const LossParams& p) const {
    return sr + p.w_sf * sf + p.w_po * po + p.w_harmonic * (hs + hq);
  }
};

struct LossGrads {
  Eigen::MatrixXd d;      // 3 x num_tets, in the print directions
  Eigen::MatrixXd quat;   // 4 x num_tets
  Eigen::MatrixXd scale;  // 3 x num_tets
  void set_zero(int num_tets) {
    d = Eigen::MatrixXd::Zero(3, num_tets);
    quat = Eigen::MatrixXd::Zero(4, num_tets);
    scale = Eigen::MatrixXd::Zero(3, num_tets);
  }
};

double sigmoid(double x);

// Individual terms. Each returns its value and accumulates gradients when the
// output pointers are non-null.
double loss_reinforce(const std::vector<StressSample>& T,
                      const DeformationSystem::Directions& dirs,
                      const LossParams& p, Eigen::MatrixXd* dd,
                      int* degenerate);
double loss_support_free(const std::vector<SurfaceSample>& B,
                         const DeformationSystem::Directions& dirs,
                         const LossParams& p, Eigen::MatrixXd* dd,
                         int* degenerate);
double loss_overhang_min(const std::vector<SurfaceSample>& B,
                         const DeformationSystem::Directions& dirs,
                         Eigen::MatrixXd* dd, int* degenerate);
double loss_clearance(const CageMesh& cage,
                      const DeformationSystem::Directions& dirs,
                      const LossParams& p, Eigen::MatrixXd* dd, int* skipped);
double loss_scale_smooth(const CageMesh& cage, const Eigen::MatrixXd& scale,
                         Eigen::MatrixXd* dscale);
double loss_quat_smooth(const CageMesh& cage, const Eigen::MatrixXd& quat,
                        Eigen::MatrixXd* dquat);

// All terms at once; grads may be null. Throws NumericalError if any term is
// non-finite.
LossTerms eval_losses(const CageMesh& cage,
                      const DeformationSystem::Directions& dirs,
                      const Eigen::MatrixXd& quat,
                      const Eigen::MatrixXd& scale,
                      const std::vector<SurfaceSample>& B,
                      const std::vector<StressSample>& T, const LossParams& p,
                      LossGrads* grads);

}  // namespace curvlayer
