#include "curvlayer/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "curvlayer/errors.hpp"

namespace curvlayer {

namespace {

// grid-bucketed k nearest neighbors, ties broken by sample id
std::vector<std::vector<int>> knn_neighbors(const std::vector<Vec3>& pts,
                                            int k) {
  const int n = static_cast<int>(pts.size());
  std::vector<std::vector<int>> result(n);
  if (n <= 1 || k <= 0) return result;
  k = std::min(k, n - 1);

  Aabb box;
  for (const auto& p : pts) box.extend(p);
  double cell = box.diagonal() / std::max(1.0, std::cbrt(double(n)));
  if (!(cell > 0)) cell = 1.0;

  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a)
    dims[a] = std::max(1, static_cast<int>(std::ceil(box.extent()[a] / cell)));
  auto cell_of = [&](const Vec3& p) {
    Eigen::Vector3i c;
    for (int a = 0; a < 3; ++a)
      c[a] = std::clamp(static_cast<int>((p[a] - box.lo[a]) / cell), 0,
                        dims[a] - 1);
    return c;
  };
  std::map<std::array<int, 3>, std::vector<int>> buckets;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3i c = cell_of(pts[i]);
    buckets[{c.x(), c.y(), c.z()}].push_back(i);
  }

  for (int i = 0; i < n; ++i) {
    Eigen::Vector3i c = cell_of(pts[i]);
    std::vector<std::pair<double, int>> cand;
    for (int ring = 1;; ++ring) {
      cand.clear();
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            auto it = buckets.find({c.x() + dx, c.y() + dy, c.z() + dz});
            if (it == buckets.end()) continue;
            for (int j : it->second)
              if (j != i) cand.emplace_back((pts[j] - pts[i]).squaredNorm(), j);
          }
      bool whole_domain = ring * 2 + 1 >= dims.maxCoeff() * 2;
      if (static_cast<int>(cand.size()) >= k) {
        std::sort(cand.begin(), cand.end());
        double dk = std::sqrt(cand[k - 1].first);
        // the searched box certainly covers a ball of radius ring*cell
        if (dk <= ring * cell || whole_domain) break;
      } else if (whole_domain) {
        std::sort(cand.begin(), cand.end());
        break;
      }
    }
    result[i].reserve(k);
    for (int q = 0; q < std::min<int>(k, cand.size()); ++q)
      result[i].push_back(cand[q].second);
  }
  return result;
}

int locate_or_throw(const CageMesh& cage, const Vec3& p, const char* what) {
  auto loc = cage.locate(p);
  if (!loc)
    throw ConfigError(std::string(what) +
                      " sample falls outside the cage; increase the cage "
                      "dilation or band");
  return loc->element;
}

}  // namespace

std::vector<SurfaceSample> build_surface_samples(const TriMesh& surface,
                                                 const CageMesh& cage,
                                                 int knn) {
  std::vector<SurfaceSample> B;
  B.reserve(surface.tris.size());
  for (const auto& t : surface.tris) {
    const Vec3 &a = surface.verts[t[0]], &b = surface.verts[t[1]],
               &c = surface.verts[t[2]];
    Vec3 n = tri_normal(a, b, c);
    double len = n.norm();
    if (len < 1e-300) continue;  // degenerate sliver contributes nothing
    SurfaceSample s;
    s.p = (a + b + c) / 3.0;
    s.n = n / len;
    s.area = 0.5 * len;
    s.element = locate_or_throw(cage, s.p, "surface");
    B.push_back(std::move(s));
  }
  std::vector<Vec3> pts(B.size());
  for (std::size_t i = 0; i < B.size(); ++i) pts[i] = B[i].p;
  auto nbrs = knn_neighbors(pts, knn);
  for (std::size_t i = 0; i < B.size(); ++i) B[i].nbrs = std::move(nbrs[i]);
  return B;
}

std::vector<StressSample> build_stress_samples(const StressField& stress,
                                               double fraction,
                                               const CageMesh& cage) {
  std::vector<StressSample> T;
  const double vol = stress.grid.h * stress.grid.h * stress.grid.h;
  for (std::size_t idx : critical_cells(stress, fraction)) {
    if (stress.principal_mag[idx] < 1e-30) continue;
    int i = static_cast<int>(idx % stress.grid.dims.x());
    int j = static_cast<int>((idx / stress.grid.dims.x()) % stress.grid.dims.y());
    int k = static_cast<int>(idx / (std::size_t(stress.grid.dims.x()) *
                                    stress.grid.dims.y()));
    StressSample s;
    s.p = stress.grid.cell_center(i, j, k);
    s.tau = stress.principal_dir[idx];
    s.volume = vol;
    s.element = locate_or_throw(cage, s.p, "stress");
    T.push_back(std::move(s));
  }
  return T;
}

void save_surface_samples(const std::vector<SurfaceSample>& B,
                          const std::string& path) {
  std::ostringstream out;
  out << "# surface_samples " << B.size() << '\n';
  for (const auto& s : B) {
    out << "b " << format_double(s.p.x()) << ' ' << format_double(s.p.y())
        << ' ' << format_double(s.p.z()) << ' ' << format_double(s.n.x()) << ' '
        << format_double(s.n.y()) << ' ' << format_double(s.n.z()) << ' '
        << format_double(s.area) << ' ' << s.element << ' '
        << (s.excluded ? 1 : 0) << ' ' << s.nbrs.size();
    for (int j : s.nbrs) out << ' ' << j;
    out << '\n';
  }
  write_text_file(path, out.str());
}

std::vector<SurfaceSample> load_surface_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open surface samples: " + path);
  std::vector<SurfaceSample> B;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag != "b") continue;
    SurfaceSample s;
    int excluded, nn;
    ss >> s.p.x() >> s.p.y() >> s.p.z() >> s.n.x() >> s.n.y() >> s.n.z() >>
        s.area >> s.element >> excluded >> nn;
    if (!ss || nn < 0) throw ConfigError(path + ": malformed sample line");
    s.excluded = excluded != 0;
    s.nbrs.resize(nn);
    for (int q = 0; q < nn; ++q) ss >> s.nbrs[q];
    if (!ss) throw ConfigError(path + ": truncated neighbor list");
    B.push_back(std::move(s));
  }
  for (const auto& s : B)
    for (int j : s.nbrs)
      if (j < 0 || j >= static_cast<int>(B.size()))
        throw ConfigError(path + ": neighbor index out of range");
  return B;
}

void save_stress_samples(const std::vector<StressSample>& T,
                         const std::string& path) {
  std::ostringstream out;
  out << "# stress_samples " << T.size() << '\n';
  for (const auto& s : T)
    out << "t " << format_double(s.p.x()) << ' ' << format_double(s.p.y())
        << ' ' << format_double(s.p.z()) << ' ' << format_double(s.tau.x())
        << ' ' << format_double(s.tau.y()) << ' ' << format_double(s.tau.z())
        << ' ' << format_double(s.volume) << ' ' << s.element << '\n';
  write_text_file(path, out.str());
}

std::vector<StressSample> load_stress_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open stress samples: " + path);
  std::vector<StressSample> T;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag != "t") continue;
    StressSample s;
    ss >> s.p.x() >> s.p.y() >> s.p.z() >> s.tau.x() >> s.tau.y() >>
        s.tau.z() >> s.volume >> s.element;
    if (!ss) throw ConfigError(path + ": malformed stress sample line");
    T.push_back(std::move(s));
  }
  return T;
}

}  // namespace curvlayer
