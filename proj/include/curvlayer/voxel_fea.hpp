#pragma once
#include <string>
#include <vector>

#include "curvlayer/geometry.hpp"
#include "curvlayer/implicit_solid.hpp"

namespace curvlayer {

struct VoxelGrid {
  Grid3 grid;
  std::vector<uint8_t> occ;  // one flag per cell
  std::size_t num_occupied() const;
};

// occupancy rule for analysis: cell center inside the solid
VoxelGrid voxelize(const ImplicitSolid& solid, double voxel_h);

// Cauchy stress per occupied cell, evaluated at cell centers, plus the
// principal direction of largest magnitude. Voigt order xx,yy,zz,xy,yz,zx.
struct StressField {
  Grid3 grid;
  std::vector<uint8_t> occ;
  std::vector<Eigen::Matrix<double, 6, 1>> sigma;  // per cell, zero if empty
  std::vector<double> principal_mag;               // |largest eigenvalue|
  std::vector<Vec3> principal_dir;                 // unit, sign-canonical
};

struct FeaSetup {
  double youngs = 3.5e9;
  double poisson = 0.35;
  double rel_tol = 1e-6;
  int max_iter = 20000;
  std::vector<Aabb> fixed;                    // nodes inside get clamped
  std::vector<std::pair<Aabb, Vec3>> loads;   // total force over boundary faces
};

struct FeaResult {
  StressField stress;
  std::vector<std::size_t> active_nodes;  // lattice node indices
  std::vector<double> displacement;       // 3 per active node
  int iterations = 0;
  double residual = 0;   // |r| / |b| at exit
  Vec3 load_sum = Vec3::Zero();
  Vec3 reaction_sum = Vec3::Zero();
};

// Linear elasticity on the occupied voxels with 8-node trilinear elements,
// solved matrix-free by Jacobi-preconditioned conjugate gradients. Throws
// NumericalError when a connected component has no fixed node or CG stalls.
FeaResult solve_elasticity(const VoxelGrid& vox, const FeaSetup& setup);

// Text format: header "stress_field ox oy oz h nx ny nz" then one line per
// occupied cell "c i j k sxx syy szz sxy syz szx".
StressField load_stress_field(const std::string& path);
void save_stress_field(const StressField& s, const std::string& path);

// Indices of the occupied cells in the top `fraction` of principal stress
// magnitude, ordered by descending magnitude (ties by cell index).
std::vector<std::size_t> critical_cells(const StressField& s, double fraction);

}  // namespace curvlayer
