#pragma once
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "curvlayer/geometry.hpp"

namespace curvlayer {

// Static BVH over triangles for closest-point queries.
class TriangleBvh {
 public:
  void build(const TriMesh& mesh);
  // squared distance and closest point on the mesh
  double sq_distance(const Vec3& p, Vec3* closest = nullptr) const;

 private:
  struct Node {
    Aabb box;
    int left = -1, right = -1;  // children, or leaf range below
    int begin = 0, end = 0;
  };
  int build_range(int begin, int end, int depth);

  const TriMesh* mesh_ = nullptr;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

// Signed solid given by a construction tree over offset segments, thickened
// surfaces, triangle meshes and boolean combinations. Negative inside,
// positive outside, values clamped to the bounding box diagonal.
class ImplicitSolid {
 public:
  struct Node {
    enum Kind { kMesh, kCapsule, kShell, kUnion, kIntersection, kComplement };
    Kind kind;
    std::vector<std::unique_ptr<Node>> children;
    // capsule: round offset of segment [a,b]
    Vec3 a, b;
    double radius = 0;
    // shell: band of total width `thickness` around the child surface
    double thickness = 0;
    // mesh payload
    TriMesh mesh;
    TriangleBvh bvh;
  };

  // Parses a solid description; mesh paths are resolved against base_dir.
  static ImplicitSolid from_json(const nlohmann::json& spec,
                                 const std::string& base_dir = ".");
  static ImplicitSolid from_json_file(const std::string& path);

  double value(const Vec3& p) const;
  // unnormalized gradient of the field; exact for offset-segment shapes,
  // central differences with step 1e-4 * bbox diagonal otherwise
  Vec3 gradient(const Vec3& p) const;
  bool analytic_gradient() const { return analytic_; }

  const Aabb& bounds() const { return bounds_; }

  // Welded triangulation of {value = 0} by marching tetrahedra on a lattice
  // of spacing voxel_h; triangles oriented outward.
  TriMesh extract_surface(double voxel_h) const;

 private:
  double eval(const Node& n, const Vec3& p) const;
  std::unique_ptr<Node> root_;
  Aabb bounds_;
  double clamp_ = 0;
  double fd_step_ = 0;
  bool analytic_ = false;
};

}  // namespace curvlayer
