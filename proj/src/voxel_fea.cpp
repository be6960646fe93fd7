#include "curvlayer/voxel_fea.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "curvlayer/errors.hpp"
#include "curvlayer/parallel.hpp"

namespace curvlayer {

std::size_t VoxelGrid::num_occupied() const {
  std::size_t n = 0;
  for (uint8_t o : occ) n += o;
  return n;
}

VoxelGrid voxelize(const ImplicitSolid& solid, double voxel_h) {
  if (!(voxel_h > 0)) throw ConfigError("analysis voxel size must be > 0");
  Aabb box = solid.bounds().inflated(0.5 * voxel_h);
  VoxelGrid v;
  v.grid.origin = box.lo;
  v.grid.h = voxel_h;
  for (int k = 0; k < 3; ++k)
    v.grid.dims[k] =
        std::max(1, static_cast<int>(std::ceil(box.extent()[k] / voxel_h)));
  v.occ.assign(v.grid.num_cells(), 0);
  parallel_for(v.grid.num_cells(), [&](std::size_t idx) {
    int i = static_cast<int>(idx % v.grid.dims.x());
    int j = static_cast<int>((idx / v.grid.dims.x()) % v.grid.dims.y());
    int k = static_cast<int>(idx / (std::size_t(v.grid.dims.x()) * v.grid.dims.y()));
    v.occ[idx] = solid.value(v.grid.cell_center(i, j, k)) <= 0 ? 1 : 0;
  });
  return v;
}

namespace {

// node c of a cell at local bits (c&1, c>>1&1, c>>2&1)
inline void node_offset(int c, int& di, int& dj, int& dk) {
  di = c & 1;
  dj = (c >> 1) & 1;
  dk = (c >> 2) & 1;
}

using Mat24 = Eigen::Matrix<double, 24, 24>;
using Mat6x24 = Eigen::Matrix<double, 6, 24>;
using Vec24 = Eigen::Matrix<double, 24, 1>;

Eigen::Matrix<double, 6, 6> elasticity_matrix(double E, double nu) {
  double lam = E * nu / ((1 + nu) * (1 - 2 * nu));
  double mu = E / (2 * (1 + nu));
  Eigen::Matrix<double, 6, 6> C = Eigen::Matrix<double, 6, 6>::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) C(i, j) = lam;
    C(i, i) = lam + 2 * mu;
    C(3 + i, 3 + i) = mu;
  }
  return C;
}

// strain-displacement matrix at natural coords xi for a cube of edge h;
// engineering shear, Voigt order xx,yy,zz,xy,yz,zx
Mat6x24 b_matrix(const Vec3& xi, double h) {
  Mat6x24 B = Mat6x24::Zero();
  for (int c = 0; c < 8; ++c) {
    int di, dj, dk;
    node_offset(c, di, dj, dk);
    double sx = 2.0 * di - 1.0, sy = 2.0 * dj - 1.0, sz = 2.0 * dk - 1.0;
    // dN/dx = dN/dxi * 2/h
    double gx = 0.125 * sx * (1 + sy * xi.y()) * (1 + sz * xi.z()) * 2.0 / h;
    double gy = 0.125 * sy * (1 + sx * xi.x()) * (1 + sz * xi.z()) * 2.0 / h;
    double gz = 0.125 * sz * (1 + sx * xi.x()) * (1 + sy * xi.y()) * 2.0 / h;
    B(0, 3 * c + 0) = gx;
    B(1, 3 * c + 1) = gy;
    B(2, 3 * c + 2) = gz;
    B(3, 3 * c + 0) = gy;
    B(3, 3 * c + 1) = gx;
    B(4, 3 * c + 1) = gz;
    B(4, 3 * c + 2) = gy;
    B(5, 3 * c + 0) = gz;
    B(5, 3 * c + 2) = gx;
  }
  return B;
}

Mat24 element_stiffness(double E, double nu, double h) {
  auto C = elasticity_matrix(E, nu);
  Mat24 K = Mat24::Zero();
  const double g = 1.0 / std::sqrt(3.0);
  const double detJ = (h / 2) * (h / 2) * (h / 2);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        Vec3 xi((2 * a - 1) * g, (2 * b - 1) * g, (2 * c - 1) * g);
        Mat6x24 B = b_matrix(xi, h);
        K += detJ * B.transpose() * C * B;
      }
  return K;
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

FeaResult solve_elasticity(const VoxelGrid& vox, const FeaSetup& setup) {
  const Grid3& g = vox.grid;
  const int nx = g.dims.x(), ny = g.dims.y(), nz = g.dims.z();
  if (setup.fixed.empty()) throw ConfigError("analysis has no fixed region");
  if (!(setup.poisson >= 0 && setup.poisson < 0.5))
    throw ConfigError("poisson ratio must lie in [0, 0.5)");

  // occupied cells and their compact ids
  std::vector<std::size_t> cells;
  std::vector<int> cell_id(vox.occ.size(), -1);
  for (std::size_t idx = 0; idx < vox.occ.size(); ++idx)
    if (vox.occ[idx]) {
      cell_id[idx] = static_cast<int>(cells.size());
      cells.push_back(idx);
    }
  if (cells.empty()) throw ConfigError("no occupied voxels to analyze");

  // active nodes
  std::vector<int> node_active(
      std::size_t(nx + 1) * (ny + 1) * (nz + 1), -1);
  std::vector<std::size_t> active_nodes;
  std::vector<std::array<int, 8>> cell_nodes(cells.size());
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    std::size_t idx = cells[ci];
    int i = static_cast<int>(idx % nx);
    int j = static_cast<int>((idx / nx) % ny);
    int k = static_cast<int>(idx / (std::size_t(nx) * ny));
    for (int c = 0; c < 8; ++c) {
      int di, dj, dk;
      node_offset(c, di, dj, dk);
      std::size_t nidx = g.node_index(i + di, j + dj, k + dk);
      if (node_active[nidx] < 0) {
        node_active[nidx] = static_cast<int>(active_nodes.size());
        active_nodes.push_back(nidx);
      }
      cell_nodes[ci][c] = node_active[nidx];
    }
  }
  const std::size_t nn = active_nodes.size();
  const std::size_t ndof = 3 * nn;

  auto node_pos = [&](std::size_t nidx) {
    int i = static_cast<int>(nidx % (nx + 1));
    int j = static_cast<int>((nidx / (nx + 1)) % (ny + 1));
    int k = static_cast<int>(nidx / (std::size_t(nx + 1) * (ny + 1)));
    return g.node(i, j, k);
  };

  // fixed dofs
  std::vector<uint8_t> fixed(nn, 0);
  for (std::size_t a = 0; a < nn; ++a) {
    Vec3 p = node_pos(active_nodes[a]);
    for (const auto& box : setup.fixed)
      if (box.contains(p)) {
        fixed[a] = 1;
        break;
      }
  }

  // every face-connected component needs a fixed node
  {
    UnionFind uf(cells.size());
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      std::size_t idx = cells[ci];
      int i = static_cast<int>(idx % nx);
      int j = static_cast<int>((idx / nx) % ny);
      int k = static_cast<int>(idx / (std::size_t(nx) * ny));
      if (i + 1 < nx && cell_id[g.cell_index(i + 1, j, k)] >= 0)
        uf.unite(static_cast<int>(ci), cell_id[g.cell_index(i + 1, j, k)]);
      if (j + 1 < ny && cell_id[g.cell_index(i, j + 1, k)] >= 0)
        uf.unite(static_cast<int>(ci), cell_id[g.cell_index(i, j + 1, k)]);
      if (k + 1 < nz && cell_id[g.cell_index(i, j, k + 1)] >= 0)
        uf.unite(static_cast<int>(ci), cell_id[g.cell_index(i, j, k + 1)]);
    }
    std::vector<uint8_t> anchored(cells.size(), 0);
    for (std::size_t ci = 0; ci < cells.size(); ++ci)
      for (int c = 0; c < 8 && !anchored[uf.find(static_cast<int>(ci))]; ++c)
        if (fixed[cell_nodes[ci][c]]) anchored[uf.find(static_cast<int>(ci))] = 1;
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      int root = uf.find(static_cast<int>(ci));
      if (!anchored[root])
        throw NumericalError(
            "free-floating voxel component (first cell index " +
            std::to_string(cells[root]) + ") has no fixed node");
    }
  }

  // loads over selected boundary faces, quarter of the face share per node
  std::vector<double> f(ndof, 0.0);
  {
    // local node ids of the face of a cell on side s of axis a
    static const int kFaceNodes[3][2][4] = {
        {{0, 2, 4, 6}, {1, 3, 5, 7}},  // x- / x+
        {{0, 1, 4, 5}, {2, 3, 6, 7}},  // y- / y+
        {{0, 1, 2, 3}, {4, 5, 6, 7}},  // z- / z+
    };
    for (const auto& [box, force] : setup.loads) {
      std::vector<std::pair<std::size_t, int>> faces;  // (cell, axis*2+side)
      for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        std::size_t idx = cells[ci];
        int i = static_cast<int>(idx % nx);
        int j = static_cast<int>((idx / nx) % ny);
        int k = static_cast<int>(idx / (std::size_t(nx) * ny));
        int coords[3] = {i, j, k};
        for (int axis = 0; axis < 3; ++axis)
          for (int side = 0; side < 2; ++side) {
            int nb[3] = {i, j, k};
            nb[axis] += side ? 1 : -1;
            bool open = nb[axis] < 0 || nb[axis] >= g.dims[axis] ||
                        !vox.occ[g.cell_index(nb[0], nb[1], nb[2])];
            if (!open) continue;
            Vec3 fc = g.cell_center(coords[0], coords[1], coords[2]);
            fc[axis] += (side ? 0.5 : -0.5) * g.h;
            if (box.contains(fc)) faces.emplace_back(ci, axis * 2 + side);
          }
      }
      if (faces.empty())
        throw ConfigError("load region selects no boundary faces");
      Vec3 per_node = force / (4.0 * static_cast<double>(faces.size()));
      for (const auto& [ci, as] : faces) {
        const int* local = kFaceNodes[as / 2][as % 2];
        for (int q = 0; q < 4; ++q) {
          int a = cell_nodes[ci][local[q]];
          for (int d = 0; d < 3; ++d) f[3 * a + d] += per_node[d];
        }
      }
    }
  }
  Vec3 load_sum = Vec3::Zero();
  for (std::size_t a = 0; a < nn; ++a)
    load_sum += Vec3(f[3 * a], f[3 * a + 1], f[3 * a + 2]);

  const Mat24 KE = element_stiffness(setup.youngs, setup.poisson, g.h);

  // y = K x over all active dofs, no boundary masking
  auto matvec_full = [&](const std::vector<double>& x, std::vector<double>& y) {
    std::fill(y.begin(), y.end(), 0.0);
    Vec24 xe, ye;
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      const auto& nd = cell_nodes[ci];
      for (int c = 0; c < 8; ++c)
        for (int d = 0; d < 3; ++d) xe[3 * c + d] = x[3 * nd[c] + d];
      ye.noalias() = KE * xe;
      for (int c = 0; c < 8; ++c)
        for (int d = 0; d < 3; ++d) y[3 * nd[c] + d] += ye[3 * c + d];
    }
  };
  auto mask = [&](std::vector<double>& x) {
    for (std::size_t a = 0; a < nn; ++a)
      if (fixed[a]) x[3 * a] = x[3 * a + 1] = x[3 * a + 2] = 0.0;
  };
  auto matvec = [&](const std::vector<double>& x, std::vector<double>& y) {
    matvec_full(x, y);
    mask(y);
  };

  // Jacobi preconditioner from the assembled diagonal
  std::vector<double> diag(ndof, 0.0);
  for (std::size_t ci = 0; ci < cells.size(); ++ci)
    for (int c = 0; c < 8; ++c)
      for (int d = 0; d < 3; ++d)
        diag[3 * cell_nodes[ci][c] + d] += KE(3 * c + d, 3 * c + d);
  for (double& v : diag)
    if (v <= 0) v = 1.0;

  std::vector<double> b = f;
  mask(b);
  double bnorm = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
  if (bnorm == 0) throw ConfigError("load vector is zero on free dofs");

  std::vector<double> u(ndof, 0.0), r = b, z(ndof), p(ndof), Ap(ndof);
  for (std::size_t i = 0; i < ndof; ++i) z[i] = r[i] / diag[i];
  mask(z);
  p = z;
  double rz = std::inner_product(r.begin(), r.end(), z.begin(), 0.0);
  double rnorm = bnorm;
  int it = 0;
  for (; it < setup.max_iter && rnorm / bnorm > setup.rel_tol; ++it) {
    matvec(p, Ap);
    double pAp = std::inner_product(p.begin(), p.end(), Ap.begin(), 0.0);
    if (!(pAp > 0))
      throw NumericalError("CG breakdown: non-positive curvature at iter " +
                           std::to_string(it));
    double alpha = rz / pAp;
    for (std::size_t i = 0; i < ndof; ++i) {
      u[i] += alpha * p[i];
      r[i] -= alpha * Ap[i];
    }
    rnorm = std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 0.0));
    for (std::size_t i = 0; i < ndof; ++i) z[i] = r[i] / diag[i];
    mask(z);
    double rz_new = std::inner_product(r.begin(), r.end(), z.begin(), 0.0);
    double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < ndof; ++i) p[i] = z[i] + beta * p[i];
  }
  if (rnorm / bnorm > setup.rel_tol)
    throw NumericalError("CG did not converge: residual " +
                         std::to_string(rnorm / bnorm) + " after " +
                         std::to_string(it) + " iterations");

  FeaResult res;
  res.iterations = it;
  res.residual = rnorm / bnorm;
  res.active_nodes = active_nodes;
  res.displacement = u;
  res.load_sum = load_sum;

  // reactions at fixed dofs balance the applied loads
  {
    std::vector<double> Ku(ndof);
    matvec_full(u, Ku);
    Vec3 rsum = Vec3::Zero();
    for (std::size_t a = 0; a < nn; ++a)
      if (fixed[a])
        rsum += Vec3(Ku[3 * a] - f[3 * a], Ku[3 * a + 1] - f[3 * a + 1],
                     Ku[3 * a + 2] - f[3 * a + 2]);
    res.reaction_sum = rsum;
  }

  // stresses at cell centers
  StressField& S = res.stress;
  S.grid = g;
  S.occ = vox.occ;
  S.sigma.assign(vox.occ.size(), Eigen::Matrix<double, 6, 1>::Zero());
  S.principal_mag.assign(vox.occ.size(), 0.0);
  S.principal_dir.assign(vox.occ.size(), Vec3::Zero());
  const Mat6x24 B0 = b_matrix(Vec3::Zero(), g.h);
  const auto C = elasticity_matrix(setup.youngs, setup.poisson);
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    Vec24 ue;
    for (int c = 0; c < 8; ++c)
      for (int d = 0; d < 3; ++d) ue[3 * c + d] = u[3 * cell_nodes[ci][c] + d];
    Eigen::Matrix<double, 6, 1> sig = C * (B0 * ue);
    S.sigma[cells[ci]] = sig;
    Mat3 T;
    T << sig[0], sig[3], sig[5],
         sig[3], sig[1], sig[4],
         sig[5], sig[4], sig[2];
    Eigen::SelfAdjointEigenSolver<Mat3> eig(T);
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (std::abs(eig.eigenvalues()[k]) >= std::abs(eig.eigenvalues()[best]))
        best = k;
    Vec3 dir = eig.eigenvectors().col(best);
    // canonical sign: largest-magnitude component positive
    int mc = 0;
    for (int k = 1; k < 3; ++k)
      if (std::abs(dir[k]) > std::abs(dir[mc])) mc = k;
    if (dir[mc] < 0) dir = -dir;
    S.principal_mag[cells[ci]] = std::abs(eig.eigenvalues()[best]);
    S.principal_dir[cells[ci]] = dir;
  }
  return res;
}

StressField load_stress_field(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open stress file: " + path);
  StressField s;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "stress_field") {
      ss >> s.grid.origin.x() >> s.grid.origin.y() >> s.grid.origin.z() >>
          s.grid.h >> s.grid.dims.x() >> s.grid.dims.y() >> s.grid.dims.z();
      if (!ss || !(s.grid.h > 0) || s.grid.dims.minCoeff() <= 0)
        throw ConfigError(path + ": malformed stress header");
      s.occ.assign(s.grid.num_cells(), 0);
      s.sigma.assign(s.grid.num_cells(), Eigen::Matrix<double, 6, 1>::Zero());
      s.principal_mag.assign(s.grid.num_cells(), 0.0);
      s.principal_dir.assign(s.grid.num_cells(), Vec3::Zero());
      header = true;
    } else if (tag == "c") {
      if (!header) throw ConfigError(path + ": cell before header");
      int i, j, k;
      Eigen::Matrix<double, 6, 1> sig;
      ss >> i >> j >> k;
      for (int q = 0; q < 6; ++q) ss >> sig[q];
      if (!ss) throw ConfigError(path + ": malformed stress cell line");
      if (i < 0 || j < 0 || k < 0 || i >= s.grid.dims.x() ||
          j >= s.grid.dims.y() || k >= s.grid.dims.z())
        throw ConfigError(path + ": stress cell out of range");
      std::size_t idx = s.grid.cell_index(i, j, k);
      s.occ[idx] = 1;
      s.sigma[idx] = sig;
      Mat3 T;
      T << sig[0], sig[3], sig[5],
           sig[3], sig[1], sig[4],
           sig[5], sig[4], sig[2];
      Eigen::SelfAdjointEigenSolver<Mat3> eig(T);
      int best = 0;
      for (int k2 = 1; k2 < 3; ++k2)
        if (std::abs(eig.eigenvalues()[k2]) >=
            std::abs(eig.eigenvalues()[best]))
          best = k2;
      Vec3 dir = eig.eigenvectors().col(best);
      int mc = 0;
      for (int k2 = 1; k2 < 3; ++k2)
        if (std::abs(dir[k2]) > std::abs(dir[mc])) mc = k2;
      if (dir[mc] < 0) dir = -dir;
      s.principal_mag[idx] = std::abs(eig.eigenvalues()[best]);
      s.principal_dir[idx] = dir;
    }
  }
  if (!header) throw ConfigError(path + ": missing stress_field header");
  return s;
}

void save_stress_field(const StressField& s, const std::string& path) {
  std::ostringstream out;
  out << "stress_field " << format_double(s.grid.origin.x()) << ' '
      << format_double(s.grid.origin.y()) << ' '
      << format_double(s.grid.origin.z()) << ' ' << format_double(s.grid.h)
      << ' ' << s.grid.dims.x() << ' ' << s.grid.dims.y() << ' '
      << s.grid.dims.z() << '\n';
  for (int k = 0; k < s.grid.dims.z(); ++k)
    for (int j = 0; j < s.grid.dims.y(); ++j)
      for (int i = 0; i < s.grid.dims.x(); ++i) {
        std::size_t idx = s.grid.cell_index(i, j, k);
        if (!s.occ[idx]) continue;
        out << "c " << i << ' ' << j << ' ' << k;
        for (int q = 0; q < 6; ++q) out << ' ' << format_double(s.sigma[idx][q]);
        out << '\n';
      }
  write_text_file(path, out.str());
}

std::vector<std::size_t> critical_cells(const StressField& s, double fraction) {
  if (!(fraction >= 0 && fraction <= 1))
    throw ConfigError("critical stress fraction must lie in [0, 1]");
  std::vector<std::size_t> occ_cells;
  for (std::size_t idx = 0; idx < s.occ.size(); ++idx)
    if (s.occ[idx]) occ_cells.push_back(idx);
  std::sort(occ_cells.begin(), occ_cells.end(),
            [&](std::size_t a, std::size_t b) {
              if (s.principal_mag[a] != s.principal_mag[b])
                return s.principal_mag[a] > s.principal_mag[b];
              return a < b;
            });
  std::size_t keep = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(occ_cells.size())));
  occ_cells.resize(std::min(keep, occ_cells.size()));
  return occ_cells;
}

}  // namespace curvlayer
