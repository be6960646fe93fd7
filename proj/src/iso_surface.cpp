#include "curvlayer/iso_surface.hpp"

#include <algorithm>
#include <cmath>

namespace curvlayer {

IsoSurfaceBuilder::IsoSurfaceBuilder(const std::vector<Vec3>& positions,
                                     const std::vector<double>& values,
                                     double iso)
    : pos_(positions), val_(values), iso_(iso) {}

int IsoSurfaceBuilder::edge_vertex(int a, int b) {
  if (a > b) std::swap(a, b);
  uint64_t key = (uint64_t(uint32_t(a)) << 32) | uint32_t(b);
  auto it = edge_cache_.find(key);
  if (it != edge_cache_.end()) return it->second;
  // interpolation parameter from the sorted pair: identical across tets
  double t = (iso_ - val_[a]) / (val_[b] - val_[a]);
  Vec3 p = pos_[a] + t * (pos_[b] - pos_[a]);
  int idx = static_cast<int>(mesh_.verts.size());
  mesh_.verts.push_back(p);
  edge_cache_.emplace(key, idx);
  return idx;
}

void IsoSurfaceBuilder::add_tet(const std::array<int, 4>& vid) {
  bool above[4];
  int nabove = 0;
  for (int i = 0; i < 4; ++i) {
    above[i] = val_[vid[i]] > iso_;
    nabove += above[i];
  }
  if (nabove == 0 || nabove == 4) return;

  // field gradient inside the tet, used only for orientation
  const Vec3 &p0 = pos_[vid[0]], &p1 = pos_[vid[1]], &p2 = pos_[vid[2]],
             &p3 = pos_[vid[3]];
  Mat3 D;
  D.col(0) = p1 - p0;
  D.col(1) = p2 - p0;
  D.col(2) = p3 - p0;
  Vec3 dv(val_[vid[1]] - val_[vid[0]], val_[vid[2]] - val_[vid[0]],
          val_[vid[3]] - val_[vid[0]]);
  Vec3 grad = D.transpose().fullPivLu().solve(dv);

  auto emit = [&](int a, int b, int c) {
    Vec3 n = tri_normal(mesh_.verts[a], mesh_.verts[b], mesh_.verts[c]);
    if (n.dot(grad) < 0) std::swap(b, c);
    mesh_.tris.push_back({a, b, c});
    tri_source_.push_back(source_);
  };

  if (nabove == 1 || nabove == 3) {
    // one vertex isolated on its side; triangle from the three cut edges
    int lone = -1;
    bool side = (nabove == 1);
    for (int i = 0; i < 4; ++i)
      if (above[i] == side) lone = i;
    int o[3], k = 0;
    for (int i = 0; i < 4; ++i)
      if (i != lone) o[k++] = i;
    int e0 = edge_vertex(vid[lone], vid[o[0]]);
    int e1 = edge_vertex(vid[lone], vid[o[1]]);
    int e2 = edge_vertex(vid[lone], vid[o[2]]);
    emit(e0, e1, e2);
  } else {
    // 2-2 split: quad over the four cut edges, corners ordered so that
    // consecutive corners share a tet vertex
    int up[2], dn[2], ku = 0, kd = 0;
    for (int i = 0; i < 4; ++i)
      (above[i] ? up[ku++] : dn[kd++]) = i;
    int e00 = edge_vertex(vid[up[0]], vid[dn[0]]);
    int e01 = edge_vertex(vid[up[0]], vid[dn[1]]);
    int e11 = edge_vertex(vid[up[1]], vid[dn[1]]);
    int e10 = edge_vertex(vid[up[1]], vid[dn[0]]);
    emit(e00, e01, e11);
    emit(e00, e11, e10);
  }
}

double nudged_iso(double iso, const std::vector<double>& values) {
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double step = 1e-12 * std::max(hi - lo, 1e-300);
  bool hit = true;
  while (hit) {
    hit = false;
    for (double v : values)
      if (v == iso) {
        hit = true;
        break;
      }
    if (hit) iso += step;
  }
  return iso;
}

}  // namespace curvlayer
