#include "curvlayer/cage.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "curvlayer/errors.hpp"
#include "curvlayer/parallel.hpp"

namespace curvlayer {

void CageMesh::finalize() {
  const int nv = num_verts(), nt = num_tets();
  if (nv == 0 || nt == 0) throw ConfigError("cage is empty");
  for (const auto& t : tets)
    for (int id : t)
      if (id < 0 || id >= nv)
        throw ConfigError("cage tet references vertex out of range");

  volumes.resize(nt);
  centroids.resize(nt);
  centering.resize(nt);
  shape_grads.resize(nt);
  box = Aabb{};
  for (const auto& v : verts) box.extend(v);

  std::vector<int> bad;
  for (int e = 0; e < nt; ++e) {
    const auto& t = tets[e];
    const Vec3 &p0 = verts[t[0]], &p1 = verts[t[1]], &p2 = verts[t[2]],
               &p3 = verts[t[3]];
    Mat3 D;
    D.col(0) = p1 - p0;
    D.col(1) = p2 - p0;
    D.col(2) = p3 - p0;
    double vol = D.determinant() / 6.0;
    volumes[e] = vol;
    if (!(vol > 0)) {
      if (bad.size() < 10) bad.push_back(e);
      continue;
    }
    centroids[e] = 0.25 * (p0 + p1 + p2 + p3);

    Eigen::Matrix<double, 4, 3> V;
    V.row(0) = p0;
    V.row(1) = p1;
    V.row(2) = p2;
    V.row(3) = p3;
    // N*V with N = I - ones/4: subtract the vertex mean from each row
    Vec3 mean = centroids[e];
    for (int i = 0; i < 4; ++i) centering[e].row(i) = V.row(i) - mean.transpose();

    // rows 1..3 of the barycentric gradient are D^{-T}; row 0 balances them
    Mat3 Dinv = D.inverse();
    shape_grads[e].row(1) = Dinv.row(0);
    shape_grads[e].row(2) = Dinv.row(1);
    shape_grads[e].row(3) = Dinv.row(2);
    shape_grads[e].row(0) =
        -(shape_grads[e].row(1) + shape_grads[e].row(2) + shape_grads[e].row(3));
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "cage has nonpositive-volume tets (reorder vertices):";
    for (int e : bad) msg << ' ' << e;
    throw ConfigError(msg.str());
  }

  // mean edge length over unique edges
  {
    std::map<std::pair<int, int>, bool> seen;
    double sum = 0;
    std::size_t cnt = 0;
    static const int kEdges[6][2] = {{0, 1}, {0, 2}, {0, 3},
                                     {1, 2}, {1, 3}, {2, 3}};
    for (const auto& t : tets)
      for (const auto& e : kEdges) {
        int a = t[e[0]], b = t[e[1]];
        if (a > b) std::swap(a, b);
        if (seen.emplace(std::make_pair(a, b), true).second) {
          sum += (verts[a] - verts[b]).norm();
          ++cnt;
        }
      }
    mean_edge = sum / static_cast<double>(cnt);
  }

  // interior face adjacency
  pairs.clear();
  {
    std::map<std::array<int, 3>, std::vector<int>> faces;
    static const int kFaces[4][3] = {{1, 2, 3}, {0, 2, 3}, {0, 1, 3}, {0, 1, 2}};
    for (int e = 0; e < nt; ++e)
      for (const auto& f : kFaces) {
        std::array<int, 3> key = {tets[e][f[0]], tets[e][f[1]], tets[e][f[2]]};
        std::sort(key.begin(), key.end());
        faces[key].push_back(e);
      }
    for (const auto& [key, elems] : faces) {
      if (elems.size() > 2) {
        std::ostringstream msg;
        msg << "face (" << key[0] << ',' << key[1] << ',' << key[2]
            << ") shared by " << elems.size() << " tets";
        throw ConfigError(msg.str());
      }
      if (elems.size() != 2) continue;
      FacePair p;
      p.left = std::min(elems[0], elems[1]);
      p.right = std::max(elems[0], elems[1]);
      p.face = key;
      Vec3 n = tri_normal(verts[key[0]], verts[key[1]], verts[key[2]]);
      double len = n.norm();
      if (len < 1e-300) throw ConfigError("degenerate interior face");
      n /= len;
      // oriented from the higher-indexed element toward the lower so that a
      // hinge whose directions fan outward (convex front) measures t <= 0 in
      // the clearance loss while a narrowing groove measures t > 0
      if (n.dot(centroids[p.right] - centroids[p.left]) > 0) n = -n;
      p.normal = n;
      pairs.push_back(p);
    }
  }

  // locator grid, roughly one tet per cell
  {
    int res = std::max(1, static_cast<int>(std::cbrt(double(nt))));
    lgrid_.origin = box.lo;
    double hmax = box.extent().maxCoeff();
    lgrid_.h = std::max(hmax / res, 1e-12);
    for (int k = 0; k < 3; ++k)
      lgrid_.dims[k] = std::max(
          1, static_cast<int>(std::ceil(box.extent()[k] / lgrid_.h)));
    lcells_.assign(lgrid_.num_cells(), {});
    for (int e = 0; e < nt; ++e) {
      Aabb tb;
      for (int i = 0; i < 4; ++i) tb.extend(verts[tets[e][i]]);
      Eigen::Vector3i lo, hi;
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::clamp(
            static_cast<int>(std::floor((tb.lo[k] - lgrid_.origin[k]) / lgrid_.h)),
            0, lgrid_.dims[k] - 1);
        hi[k] = std::clamp(
            static_cast<int>(std::floor((tb.hi[k] - lgrid_.origin[k]) / lgrid_.h)),
            0, lgrid_.dims[k] - 1);
      }
      for (int k = lo.z(); k <= hi.z(); ++k)
        for (int j = lo.y(); j <= hi.y(); ++j)
          for (int i = lo.x(); i <= hi.x(); ++i)
            lcells_[lgrid_.cell_index(i, j, k)].push_back(e);
    }
  }
}

std::optional<CageMesh::Location> CageMesh::locate(const Vec3& p) const {
  if (lcells_.empty()) throw NumericalError("cage not finalized");
  if (!box.inflated(1e-9 * (1 + box.diagonal())).contains(p)) return std::nullopt;
  Eigen::Vector3i c;
  for (int k = 0; k < 3; ++k)
    c[k] = std::clamp(
        static_cast<int>(std::floor((p[k] - lgrid_.origin[k]) / lgrid_.h)), 0,
        lgrid_.dims[k] - 1);
  // candidate lists are ascending by construction; first hit is the smallest id
  for (int e : lcells_[lgrid_.cell_index(c.x(), c.y(), c.z())]) {
    Eigen::Vector4d bary =
        Eigen::Vector4d::Constant(0.25) + shape_grads[e] * (p - centroids[e]);
    if (bary.minCoeff() >= -1e-10) return Location{e, bary};
  }
  return std::nullopt;
}

CageMesh generate_cage(const ImplicitSolid& solid, double voxel_h,
                       int dilation) {
  if (!(voxel_h > 0)) throw ConfigError("cage voxel size must be > 0");
  if (dilation < 0) throw ConfigError("cage dilation must be >= 0");

  Aabb box = solid.bounds().inflated((dilation + 1.5) * voxel_h);
  Grid3 grid;
  grid.origin = box.lo;
  grid.h = voxel_h;
  for (int k = 0; k < 3; ++k)
    grid.dims[k] =
        std::max(1, static_cast<int>(std::ceil(box.extent()[k] / voxel_h)));

  // band-inclusive occupancy keeps cells whose center is within the half
  // diagonal of the surface, so features thinner than a cell still register
  const double band = voxel_h * std::sqrt(3.0) / 2.0;
  std::vector<uint8_t> occ(grid.num_cells(), 0);
  parallel_for(grid.num_cells(), [&](std::size_t idx) {
    int i = static_cast<int>(idx % grid.dims.x());
    int j = static_cast<int>((idx / grid.dims.x()) % grid.dims.y());
    int k = static_cast<int>(idx / (std::size_t(grid.dims.x()) * grid.dims.y()));
    occ[idx] = solid.value(grid.cell_center(i, j, k)) <= band ? 1 : 0;
  });

  // Chebyshev dilation by `dilation` rings
  for (int round = 0; round < dilation; ++round) {
    std::vector<uint8_t> next = occ;
    for (int k = 0; k < grid.dims.z(); ++k)
      for (int j = 0; j < grid.dims.y(); ++j)
        for (int i = 0; i < grid.dims.x(); ++i) {
          if (occ[grid.cell_index(i, j, k)]) continue;
          bool on = false;
          for (int dk = -1; dk <= 1 && !on; ++dk)
            for (int dj = -1; dj <= 1 && !on; ++dj)
              for (int di = -1; di <= 1 && !on; ++di) {
                int ii = i + di, jj = j + dj, kk = k + dk;
                if (ii < 0 || jj < 0 || kk < 0 || ii >= grid.dims.x() ||
                    jj >= grid.dims.y() || kk >= grid.dims.z())
                  continue;
                on = occ[grid.cell_index(ii, jj, kk)] != 0;
              }
          next[grid.cell_index(i, j, k)] = on;
        }
    occ = std::move(next);
  }

  // compact node ids over occupied cells
  std::vector<int> node_id(
      std::size_t(grid.dims.x() + 1) * (grid.dims.y() + 1) * (grid.dims.z() + 1),
      -1);
  CageMesh cage;
  auto use_node = [&](int i, int j, int k) {
    std::size_t idx = grid.node_index(i, j, k);
    if (node_id[idx] < 0) {
      node_id[idx] = static_cast<int>(cage.verts.size());
      cage.verts.push_back(grid.node(i, j, k));
    }
    return node_id[idx];
  };

  static const int kPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                  {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (int k = 0; k < grid.dims.z(); ++k)
    for (int j = 0; j < grid.dims.y(); ++j)
      for (int i = 0; i < grid.dims.x(); ++i) {
        if (!occ[grid.cell_index(i, j, k)]) continue;
        for (const auto& perm : kPerm) {
          int steps[3] = {0, 0, 0};
          std::array<int, 4> t;
          t[0] = use_node(i, j, k);
          for (int s = 0; s < 3; ++s) {
            steps[perm[s]] = 1;
            t[s + 1] = use_node(i + steps[0], j + steps[1], k + steps[2]);
          }
          // restore positive orientation for odd permutations
          Vec3 d1 = cage.verts[t[1]] - cage.verts[t[0]];
          Vec3 d2 = cage.verts[t[2]] - cage.verts[t[0]];
          Vec3 d3 = cage.verts[t[3]] - cage.verts[t[0]];
          if (d1.cross(d2).dot(d3) < 0) std::swap(t[2], t[3]);
          cage.tets.push_back(t);
        }
      }

  if (cage.tets.empty())
    throw ConfigError("cage generation produced no occupied cells");
  cage.finalize();
  return cage;
}

namespace {

CageMesh load_native(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open cage file: " + path);
  CageMesh cage;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 p;
      ss >> p.x() >> p.y() >> p.z();
      if (!ss)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": malformed vertex");
      cage.verts.push_back(p);
    } else if (tag == "t") {
      std::array<int, 4> t;
      ss >> t[0] >> t[1] >> t[2] >> t[3];
      if (!ss)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": malformed tet");
      cage.tets.push_back(t);
    }
  }
  return cage;
}

CageMesh load_tetgen(const std::string& node_path) {
  std::ifstream nodes(node_path);
  if (!nodes) throw ConfigError("cannot open node file: " + node_path);
  std::filesystem::path ele_path(node_path);
  ele_path.replace_extension(".ele");
  std::ifstream eles(ele_path);
  if (!eles) throw ConfigError("cannot open ele file: " + ele_path.string());

  auto next_data_line = [](std::istream& in, std::istringstream& out) {
    std::string line;
    while (std::getline(in, line)) {
      auto pos = line.find('#');
      if (pos != std::string::npos) line.resize(pos);
      std::istringstream probe(line);
      std::string tok;
      if (probe >> tok) {
        out = std::istringstream(line);
        return true;
      }
    }
    return false;
  };

  CageMesh cage;
  std::istringstream ss;
  if (!next_data_line(nodes, ss)) throw ConfigError("empty node file");
  std::size_t npoints;
  int dim;
  ss >> npoints >> dim;
  if (dim != 3) throw ConfigError("node file must be 3d");
  long first_index = -1;
  for (std::size_t i = 0; i < npoints; ++i) {
    if (!next_data_line(nodes, ss))
      throw ConfigError("node file truncated at point " + std::to_string(i));
    long idx;
    Vec3 p;
    ss >> idx >> p.x() >> p.y() >> p.z();
    if (!ss) throw ConfigError("malformed node line");
    if (first_index < 0) first_index = idx;
    cage.verts.push_back(p);
  }
  if (!next_data_line(eles, ss)) throw ConfigError("empty ele file");
  std::size_t ntets;
  int per;
  ss >> ntets >> per;
  if (per != 4) throw ConfigError("ele file must have 4 nodes per tet");
  for (std::size_t i = 0; i < ntets; ++i) {
    if (!next_data_line(eles, ss))
      throw ConfigError("ele file truncated at tet " + std::to_string(i));
    long idx, a, b, c, d;
    ss >> idx >> a >> b >> c >> d;
    if (!ss) throw ConfigError("malformed ele line");
    cage.tets.push_back({static_cast<int>(a - first_index),
                         static_cast<int>(b - first_index),
                         static_cast<int>(c - first_index),
                         static_cast<int>(d - first_index)});
  }
  return cage;
}

}  // namespace

CageMesh load_cage(const std::string& path) {
  CageMesh cage = std::filesystem::path(path).extension() == ".node"
                      ? load_tetgen(path)
                      : load_native(path);
  cage.finalize();
  return cage;
}

void save_cage(const CageMesh& cage, const std::string& path) {
  std::ostringstream out;
  for (const auto& v : cage.verts)
    out << "v " << format_double(v.x()) << ' ' << format_double(v.y()) << ' '
        << format_double(v.z()) << '\n';
  for (const auto& t : cage.tets)
    out << "t " << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
  write_text_file(path, out.str());
}

}  // namespace curvlayer
