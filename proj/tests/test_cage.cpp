#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>
#include <set>

#include "curvlayer/cage.hpp"
#include "curvlayer/errors.hpp"
#include "curvlayer/rng.hpp"
#include "support/oracles.hpp"
#include "support/scenes.hpp"

using namespace curvlayer;
using namespace curvlayer::testing;
using nlohmann::json;

namespace {

ImplicitSolid capsule(const Vec3& a, const Vec3& b, double r) {
  return ImplicitSolid::from_json(json{{"kind", "capsule"},
                                       {"a", {a.x(), a.y(), a.z()}},
                                       {"b", {b.x(), b.y(), b.z()}},
                                       {"radius", r}});
}

double tet_volume(const CageMesh& c, int e) {
  const auto& t = c.tets[e];
  return (c.verts[t[1]] - c.verts[t[0]])
             .cross(c.verts[t[2]] - c.verts[t[0]])
             .dot(c.verts[t[3]] - c.verts[t[0]]) /
         6.0;
}

}  // namespace

TEST_CASE("generated cage covers the solid with sound elements") {
  ImplicitSolid s = capsule(Vec3(0, 0, 0), Vec3(0, 0, 8), 2.5);
  double h = 1.5;
  CageMesh cage = generate_cage(s, h, 1);
  REQUIRE(cage.num_tets() > 0);

  double total = 0;
  for (int e = 0; e < cage.num_tets(); ++e) {
    double v = tet_volume(cage, e);
    CHECK(v > 0);
    CHECK(cage.volumes[e] == doctest::Approx(v).epsilon(1e-12));
    total += v;
  }
  // six tets tile each cell exactly
  double cells = std::round(total / (h * h * h));
  CHECK(total == doctest::Approx(cells * h * h * h).epsilon(1e-9));
  CHECK(cage.num_tets() == int(cells) * 6);

  // every interior point of the solid sits in some element
  Rng rng(7);
  int found = 0;
  for (int i = 0; i < 300; ++i) {
    Vec3 p(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 11));
    if (s.value(p) > -1e-3) continue;
    ++found;
    CHECK(cage.locate(p).has_value());
  }
  CHECK(found > 50);
}

TEST_CASE("locate agrees with the brute force point in tet check") {
  Rng rng(99);
  CageMesh cage = jittered_cage(rng, 1.0, 2);
  for (int i = 0; i < 400; ++i) {
    Vec3 p(rng.uniform(-0.4, 2.4), rng.uniform(-0.4, 2.4),
           rng.uniform(-0.4, 2.4));
    int ref = -1;
    for (int e = 0; e < cage.num_tets() && ref < 0; ++e) {
      const auto& t = cage.tets[e];
      if (in_tet(p, cage.verts[t[0]], cage.verts[t[1]], cage.verts[t[2]],
                 cage.verts[t[3]], -1e-9))
        ref = e;
    }
    auto loc = cage.locate(p);
    if (ref < 0) {
      // allow a hit only right on a boundary face
      if (loc) {
        CHECK(loc->bary.minCoeff() > -1e-8);
      }
      continue;
    }
    REQUIRE(loc.has_value());
    // barycentric output reproduces the point
    const auto& t = cage.tets[loc->element];
    Vec3 q = Vec3::Zero();
    for (int k = 0; k < 4; ++k) q += loc->bary[k] * cage.verts[t[k]];
    CHECK((q - p).norm() < 1e-9);
    CHECK(loc->bary.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(loc->bary.minCoeff() >= -1e-9);
  }
}

TEST_CASE("face pairs are interior faces oriented left to right") {
  Rng rng(5);
  CageMesh cage = jittered_cage(rng, 1.0, 2);
  // count faces by sorted vertex triple
  std::map<std::array<int, 3>, std::vector<int>> faces;
  const int kFaces[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};
  for (int e = 0; e < cage.num_tets(); ++e)
    for (const auto& f : kFaces) {
      std::array<int, 3> key = {cage.tets[e][f[0]], cage.tets[e][f[1]],
                                cage.tets[e][f[2]]};
      std::sort(key.begin(), key.end());
      faces[key].push_back(e);
    }
  std::size_t interior = 0;
  for (const auto& [k, owners] : faces) {
    REQUIRE(owners.size() <= 2);
    if (owners.size() == 2) ++interior;
  }
  CHECK(cage.pairs.size() == interior);

  for (const auto& pr : cage.pairs) {
    CHECK(pr.left < pr.right);
    std::array<int, 3> key = pr.face;
    std::sort(key.begin(), key.end());
    auto it = faces.find(key);
    REQUIRE(it != faces.end());
    CHECK(((it->second[0] == pr.left && it->second[1] == pr.right) ||
           (it->second[0] == pr.right && it->second[1] == pr.left)));
    CHECK(pr.normal.norm() == doctest::Approx(1.0).epsilon(1e-12));
    // points from the right centroid back toward the left one
    CHECK(pr.normal.dot(cage.centroids[pr.right] - cage.centroids[pr.left]) <
          0);
    // and is actually normal to the face
    Vec3 fn = tri_normal(cage.verts[pr.face[0]], cage.verts[pr.face[1]],
                         cage.verts[pr.face[2]]);
    CHECK(std::abs(std::abs(fn.normalized().dot(pr.normal)) - 1.0) < 1e-9);
  }
}

TEST_CASE("centering block drops translation") {
  Rng rng(31);
  CageMesh cage = jittered_cage(rng, 1.0, 1);
  for (int e = 0; e < cage.num_tets(); ++e) {
    // columns of N V_e sum to zero because rows of N do
    Eigen::RowVector3d colsum = cage.centering[e].colwise().sum();
    CHECK(colsum.norm() < 1e-12);
    // and N V_e equals V_e minus the vertex mean
    Eigen::Matrix<double, 4, 3> v;
    for (int k = 0; k < 4; ++k) v.row(k) = cage.verts[cage.tets[e][k]];
    Eigen::Matrix<double, 4, 3> centered =
        v.rowwise() - v.colwise().mean();
    CHECK((cage.centering[e] - centered).norm() < 1e-12);
  }
}

TEST_CASE("shape gradients reproduce linear fields") {
  Rng rng(13);
  CageMesh cage = jittered_cage(rng, 1.0, 1);
  Vec3 g(0.3, -1.7, 2.2);
  for (int e = 0; e < cage.num_tets(); ++e) {
    Vec3 acc = Vec3::Zero();
    Vec3 rowsum = Vec3::Zero();
    for (int k = 0; k < 4; ++k) {
      double fk = g.dot(cage.verts[cage.tets[e][k]]) + 4.5;
      acc += fk * cage.shape_grads[e].row(k).transpose();
      rowsum += cage.shape_grads[e].row(k).transpose();
    }
    CHECK((acc - g).norm() < 1e-10);
    CHECK(rowsum.norm() < 1e-10);  // gradients of a partition of unity
  }
}

TEST_CASE("degenerate cages are rejected") {
  CageMesh c;
  c.verts = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  c.tets = {{0, 2, 1, 3}};  // inverted
  CHECK_THROWS_AS(c.finalize(), ConfigError);

  CageMesh flat;
  flat.verts = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(1, 1, 0)};
  flat.tets = {{0, 1, 2, 3}};  // zero volume
  CHECK_THROWS_AS(flat.finalize(), ConfigError);
}

TEST_CASE("dilation grows the cage") {
  ImplicitSolid s = capsule(Vec3(0, 0, 0), Vec3(0, 0, 4), 2);
  CageMesh c1 = generate_cage(s, 1.0, 1);
  CageMesh c2 = generate_cage(s, 1.0, 2);
  CHECK(c2.num_tets() > c1.num_tets());
  CHECK((c2.box.lo.array() <= c1.box.lo.array()).all());
  CHECK((c2.box.hi.array() >= c1.box.hi.array()).all());
}

TEST_CASE("native save load round trip is bitwise") {
  Rng rng(41);
  CageMesh cage = jittered_cage(rng, 0.8, 2);
  TempDir td("cage");
  save_cage(cage, td.file("c.cage"));
  CageMesh r = load_cage(td.file("c.cage"));
  REQUIRE(r.num_verts() == cage.num_verts());
  REQUIRE(r.num_tets() == cage.num_tets());
  for (int i = 0; i < cage.num_verts(); ++i) CHECK(r.verts[i] == cage.verts[i]);
  for (int i = 0; i < cage.num_tets(); ++i) CHECK(r.tets[i] == cage.tets[i]);
}

TEST_CASE("tetgen node ele pair loads") {
  TempDir td("tetgen");
  write_text_file(td.file("m.node"),
                  "4 3 0 0\n"
                  "1 0 0 0\n"
                  "2 1 0 0\n"
                  "3 0 1 0\n"
                  "4 0 0 1\n");
  write_text_file(td.file("m.ele"),
                  "1 4 0\n"
                  "1 1 2 3 4\n");
  CageMesh c = load_cage(td.file("m.node"));
  REQUIRE(c.num_verts() == 4);
  REQUIRE(c.num_tets() == 1);
  CHECK(c.verts[3] == Vec3(0, 0, 1));
  CHECK(c.volumes[0] == doctest::Approx(1.0 / 6));
}
