#pragma once
#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "curvlayer/geometry.hpp"

namespace curvlayer {

// Builds a welded triangulation of the level set {field = iso} for a scalar
// field that is linear inside each tetrahedron. Crossing points are computed
// once per undirected edge, keyed on the sorted global vertex pair, so tets
// sharing an edge produce bitwise identical vertices and the result is
// edge-manifold by construction.
class IsoSurfaceBuilder {
 public:
  IsoSurfaceBuilder(const std::vector<Vec3>& positions,
                    const std::vector<double>& values, double iso);

  // Emits 0, 1 or 2 triangles for one tet of global vertex ids. Triangles are
  // wound so their normal points toward increasing field value.
  void add_tet(const std::array<int, 4>& vid);

  TriMesh take_mesh() { return std::move(mesh_); }
  // source tet recorded per triangle, parallel to mesh.tris
  std::vector<int>& tri_source() { return tri_source_; }
  void set_current_source(int s) { source_ = s; }

 private:
  int edge_vertex(int a, int b);

  const std::vector<Vec3>& pos_;
  const std::vector<double>& val_;
  double iso_;
  TriMesh mesh_;
  std::vector<int> tri_source_;
  int source_ = -1;
  std::unordered_map<uint64_t, int> edge_cache_;
};

// Shifts iso away from exact vertex hits: while any value equals iso, nudges
// by 1e-12 * (max-min). Returns the adjusted iso.
double nudged_iso(double iso, const std::vector<double>& values);

}  // namespace curvlayer
