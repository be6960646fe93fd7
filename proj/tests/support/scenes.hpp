#pragma once
// Small shared scenes and filesystem scaffolding for the tests.
#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "curvlayer/cage.hpp"
#include "curvlayer/geometry.hpp"
#include "curvlayer/rng.hpp"

namespace curvlayer::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    namespace fs = std::filesystem;
    path_ = (fs::temp_directory_path() /
             ("curvlayer_" + tag + "_" + std::to_string(::getpid())))
                .string();
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (std::filesystem::path(path_) / name).string();
  }

 private:
  std::string path_;
};

// closed axis-aligned box [lo, hi], outward winding
inline TriMesh box_mesh(const Vec3& lo, const Vec3& hi) {
  TriMesh m;
  for (int k = 0; k < 8; ++k)
    m.verts.push_back(Vec3(k & 1 ? hi.x() : lo.x(), k & 2 ? hi.y() : lo.y(),
                           k & 4 ? hi.z() : lo.z()));
  const int quads[6][4] = {{0, 4, 6, 2}, {1, 3, 7, 5}, {0, 1, 5, 4},
                           {2, 6, 7, 3}, {0, 2, 3, 1}, {4, 5, 7, 6}};
  for (const auto& q : quads) {
    m.tris.push_back({q[0], q[1], q[2]});
    m.tris.push_back({q[0], q[2], q[3]});
  }
  return m;
}

// Prism with a V bottom: cross-section is the triangle (-a, a), (0, 0),
// (a, a) extruded along y, so both undersides overhang at exactly 45
// degrees. Printed flat it needs support under the whole V.
inline TriMesh wedge_mesh(double a, double width_y) {
  TriMesh m;
  m.verts = {
      Vec3(-a, 0, a),       Vec3(0, 0, 0),       Vec3(a, 0, a),
      Vec3(-a, width_y, a), Vec3(0, width_y, 0), Vec3(a, width_y, a),
  };
  const int quads[3][4] = {
      {0, 1, 4, 3},  // left slant
      {1, 2, 5, 4},  // right slant
      {2, 0, 3, 5},  // top
  };
  for (const auto& q : quads) {
    m.tris.push_back({q[0], q[1], q[2]});
    m.tris.push_back({q[0], q[2], q[3]});
  }
  m.tris.push_back({0, 2, 1});  // y = 0 cap
  m.tris.push_back({3, 4, 5});  // y = width cap
  return m;
}

// 2x2x2-cell cage with jittered vertices; jitter below 0.3 h keeps all six
// tets per cell positively oriented
inline CageMesh jittered_cage(Rng& rng, double h = 1.0, int cells = 2,
                              double jitter = 0.25) {
  CageMesh cage;
  int n = cells + 1;
  auto vid = [&](int i, int j, int k) { return (k * n + j) * n + i; };
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i)
        cage.verts.push_back(h * Vec3(i, j, k) +
                             jitter * h *
                                 Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1),
                                      rng.uniform(-1, 1)));
  const int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 7, 5}, {0, 5, 7, 4},
                           {0, 3, 2, 7}, {0, 2, 6, 7}, {0, 6, 4, 7}};
  for (int k = 0; k < cells; ++k)
    for (int j = 0; j < cells; ++j)
      for (int i = 0; i < cells; ++i) {
        int c[8] = {vid(i, j, k),         vid(i + 1, j, k),
                    vid(i, j + 1, k),     vid(i + 1, j + 1, k),
                    vid(i, j, k + 1),     vid(i + 1, j, k + 1),
                    vid(i, j + 1, k + 1), vid(i + 1, j + 1, k + 1)};
        for (const auto& t : kTets)
          cage.tets.push_back({c[t[0]], c[t[1]], c[t[2]], c[t[3]]});
      }
  cage.finalize();
  return cage;
}

// two tets sharing face (1,2,3)
inline CageMesh two_tet_cage() {
  CageMesh cage;
  cage.verts = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1),
                Vec3(1, 1, 1)};
  cage.tets = {{0, 1, 2, 3}, {4, 1, 3, 2}};
  cage.finalize();
  return cage;
}

}  // namespace curvlayer::testing
