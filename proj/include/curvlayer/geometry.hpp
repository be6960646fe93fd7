#pragma once
#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace curvlayer {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Aabb {
  Vec3 lo{std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void extend(const Aabb& b) {
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }
  bool valid() const { return (lo.array() <= hi.array()).all(); }
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }
  double diagonal() const { return (hi - lo).norm(); }
  Aabb inflated(double r) const {
    Aabb b = *this;
    b.lo.array() -= r;
    b.hi.array() += r;
    return b;
  }
  double sq_distance(const Vec3& p) const {
    Vec3 d = (lo - p).cwiseMax(0.0).cwiseMax(p - hi);
    return d.squaredNorm();
  }
};

struct TriMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> tris;

  Aabb bounds() const {
    Aabb b;
    for (const auto& v : verts) b.extend(v);
    return b;
  }
  double total_area() const;
};

Vec3 tri_normal(const Vec3& a, const Vec3& b, const Vec3& c);  // not normalized
double tri_area(const Vec3& a, const Vec3& b, const Vec3& c);

// Wavefront OBJ, triangles only. Floats written with %.17g so output is
// byte-stable for identical inputs.
TriMesh load_obj(const std::string& path);
void save_obj(const TriMesh& mesh, const std::string& path);

// Closest-point distance from p to triangle abc.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                               const Vec3& c);

// Axis-aligned voxel lattice: cell (i,j,k) spans
// origin + h*[i,i+1]x[j,j+1]x[k,k+1].
struct Grid3 {
  Vec3 origin{0, 0, 0};
  double h = 1.0;
  Eigen::Vector3i dims{0, 0, 0};  // cell counts

  std::size_t num_cells() const {
    return std::size_t(dims.x()) * dims.y() * dims.z();
  }
  std::size_t cell_index(int i, int j, int k) const {
    return std::size_t(i) + std::size_t(dims.x()) * (j + std::size_t(dims.y()) * k);
  }
  Vec3 cell_center(int i, int j, int k) const {
    return origin + h * Vec3(i + 0.5, j + 0.5, k + 0.5);
  }
  Vec3 node(int i, int j, int k) const { return origin + h * Vec3(i, j, k); }
  // node lattice is (dims+1)^3
  std::size_t node_index(int i, int j, int k) const {
    return std::size_t(i) +
           std::size_t(dims.x() + 1) * (j + std::size_t(dims.y() + 1) * k);
  }
};

// FNV-1a over bytes, used for config/input staleness stamps.
uint64_t fnv1a64(const void* data, std::size_t n, uint64_t seed = 1469598103934665603ull);
uint64_t fnv1a64(const std::string& s, uint64_t seed = 1469598103934665603ull);
std::string hex64(uint64_t v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::string format_double(double v);  // %.17g

}  // namespace curvlayer
