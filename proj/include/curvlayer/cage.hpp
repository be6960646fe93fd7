#pragma once
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "curvlayer/geometry.hpp"
#include "curvlayer/implicit_solid.hpp"

namespace curvlayer {

// Interior face shared by two tets; normal is unit, oriented from `left`
// (smaller element id) toward `right`.
struct FacePair {
  int left, right;
  std::array<int, 3> face;
  Vec3 normal;
};

// Tetrahedral control cage. Rest geometry plus the per-element quantities the
// deformation solve and losses reuse every epoch: rest volumes, centroids,
// the centered vertex block N*V_e (N = I - 1/4 ones, which averages out
// translation) and barycentric gradients.
struct CageMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 4>> tets;

  // filled by finalize()
  std::vector<double> volumes;
  std::vector<Vec3> centroids;
  std::vector<Eigen::Matrix<double, 4, 3>> centering;    // N * V_e
  std::vector<Eigen::Matrix<double, 4, 3>> shape_grads;  // row i = grad a_i
  std::vector<FacePair> pairs;
  Aabb box;
  double mean_edge = 0;

  int num_verts() const { return static_cast<int>(verts.size()); }
  int num_tets() const { return static_cast<int>(tets.size()); }

  // Derives cached quantities and the point locator. Throws ConfigError on
  // nonpositive volumes or faces shared by more than two tets.
  void finalize();

  struct Location {
    int element;
    Eigen::Vector4d bary;
  };
  // Smallest containing element id, barycentric tolerance -1e-10.
  std::optional<Location> locate(const Vec3& p) const;

 private:
  Grid3 lgrid_;
  std::vector<std::vector<int>> lcells_;
};

// Voxelizes the solid with a band-inclusive rule (cell occupied when
// H(center) <= h * sqrt(3)/2), dilates occupancy by `dilation` rings, then
// splits every cell into six tets with consistent diagonals.
CageMesh generate_cage(const ImplicitSolid& solid, double voxel_h,
                       int dilation);

// Native format: lines "v x y z" then "t i0 i1 i2 i3" (zero-based).
// load_cage also accepts a TetGen .node file with a sibling .ele.
CageMesh load_cage(const std::string& path);
void save_cage(const CageMesh& cage, const std::string& path);

}  // namespace curvlayer
