#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "curvlayer/errors.hpp"
#include "curvlayer/slicer.hpp"
#include "support/oracles.hpp"
#include "support/scenes.hpp"

using namespace curvlayer;
using namespace curvlayer::testing;
using nlohmann::json;

namespace {

ImplicitSolid capsule_solid(double radius = 3) {
  return ImplicitSolid::from_json(json{{"kind", "capsule"},
                                       {"a", {0, 0, 0}},
                                       {"b", {0, 0, 8}},
                                       {"radius", radius}});
}

Eigen::MatrixXd identity_field(const CageMesh& cage) {
  Eigen::MatrixXd xi(cage.num_verts(), 3);
  for (int i = 0; i < cage.num_verts(); ++i) xi.row(i) = cage.verts[i];
  return xi;
}

double min_dist(const Vec3& p, const std::vector<Vec3>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) best = std::min(best, (p - q).norm());
  return best;
}

}  // namespace

TEST_CASE("iso schedule is uniform for the identity field") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.2, 1);
  Eigen::MatrixXd xi = identity_field(cage);

  SlicePlan plan = pick_isovalues(cage, xi, solid, 0.4, 1.0);
  REQUIRE(plan.isos.size() > 5);
  // every cage vertex inside the solid lies within its height bounds
  CHECK(plan.g_lo >= -3.0 - 1e-12);
  CHECK(plan.g_hi <= 11.0 + 1e-12);
  CHECK(plan.g_lo < -2.0);
  CHECK(plan.g_hi > 10.0);

  // gradient is 1 everywhere: half step first, then exact t_max steps
  CHECK(plan.isos.front() == doctest::Approx(plan.g_lo + 0.5).epsilon(1e-12));
  for (std::size_t i = 1; i < plan.isos.size(); ++i)
    CHECK(plan.isos[i] - plan.isos[i - 1] ==
          doctest::Approx(1.0).epsilon(1e-12));
  CHECK(plan.isos.back() <= plan.g_hi);
  CHECK(plan.isos.back() + 1.0 > plan.g_hi);

  // doubling the field gradient doubles the iso spacing
  SlicePlan scaled = pick_isovalues(cage, 2.0 * xi, solid, 0.4, 1.0);
  for (std::size_t i = 1; i < scaled.isos.size(); ++i)
    CHECK(scaled.isos[i] - scaled.isos[i - 1] ==
          doctest::Approx(2.0).epsilon(1e-12));

  CHECK_THROWS_AS(pick_isovalues(cage, xi, solid, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(pick_isovalues(cage, xi, solid, 2.0, 1.0), ConfigError);
}

TEST_CASE("degenerate plans are refused") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.2, 1);
  Eigen::MatrixXd xi = identity_field(cage);

  // flat field
  Eigen::MatrixXd flat = xi;
  flat.col(2).setZero();
  CHECK_THROWS_WITH_AS(pick_isovalues(cage, flat, solid, 0.4, 1.0),
                       doctest::Contains("flat"), PlanError);

  // kinked field: gradient jumps 1 -> 3 at z = 0, so a slab containing the
  // kink cannot keep a t_max layer above t_min when t_min == t_max
  Eigen::MatrixXd kink = xi;
  for (int i = 0; i < cage.num_verts(); ++i) {
    double z = cage.verts[i].z();
    kink(i, 2) = z + 2.0 * std::max(0.0, z);
  }
  CHECK_THROWS_WITH_AS(pick_isovalues(cage, kink, solid, 0.5, 0.5),
                       doctest::Contains("infeasible"), PlanError);

  // solid nowhere near the cage
  ImplicitSolid far_solid = ImplicitSolid::from_json(
      json{{"kind", "capsule"}, {"a", {50, 50, 50}}, {"b", {50, 50, 58}},
           {"radius", 3}});
  Rng rng(5);
  CageMesh near = jittered_cage(rng, 1.0, 2, 0.2);
  Eigen::MatrixXd near_xi = identity_field(near);
  CHECK_THROWS_WITH_AS(pick_isovalues(near, near_xi, far_solid, 0.4, 1.0),
                       doctest::Contains("intersect"), PlanError);
}

TEST_CASE("identity layers are planar and face upward") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.2, 1);
  Eigen::MatrixXd xi = identity_field(cage);

  TriMesh layer = extract_layer(cage, xi, 3.7);
  REQUIRE(layer.tris.size() > 0);
  for (const auto& v : layer.verts) CHECK(std::abs(v.z() - 3.7) < 1e-9);
  for (const auto& t : layer.tris) {
    Vec3 n = tri_normal(layer.verts[t[0]], layer.verts[t[1]],
                        layer.verts[t[2]]);
    CHECK(n.z() > 0);
  }
  // the full cross section of the cage block
  CHECK(layer.total_area() == doctest::Approx(86.4).epsilon(1e-9));
}

TEST_CASE("marching tetrahedra matches the per-tet clip oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    CageMesh cage = jittered_cage(rng, 1.0, 2, 0.25);
    Eigen::MatrixXd xi(cage.num_verts(), 3);
    double w1 = rng.uniform(0.5, 2.0), w2 = rng.uniform(0.1, 0.4);
    for (int i = 0; i < cage.num_verts(); ++i) {
      Vec3 v = cage.verts[i];
      xi.row(i) = v;
      xi(i, 2) = w1 * v.z() + w2 * std::sin(v.x() + 2 * v.y()) +
                 0.1 * v.x() * v.x();
    }
    std::vector<double> g(cage.num_verts());
    for (int i = 0; i < cage.num_verts(); ++i) g[i] = xi(i, 2);
    std::vector<double> sorted = g;
    std::sort(sorted.begin(), sorted.end());

    for (int k = 0; k < 3; ++k) {
      // midpoints of interior value gaps never collide with a vertex value
      std::size_t a = sorted.size() / 4 + k * sorted.size() / 6;
      double iso = 0.5 * (sorted[a] + sorted[a + 1]);
      if (sorted[a + 1] - sorted[a] < 1e-9) continue;

      TriMesh mesh = extract_layer(cage, xi, iso);
      double oracle_area = 0;
      std::vector<Vec3> oracle_verts;
      for (int e = 0; e < cage.num_tets(); ++e) {
        const auto& t = cage.tets[e];
        std::array<Vec3, 4> vs;
        std::array<double, 4> gv;
        for (int i = 0; i < 4; ++i) {
          vs[i] = cage.verts[t[i]];
          gv[i] = g[t[i]];
        }
        auto poly = tet_iso_polygon(vs, gv, iso);
        if (poly.size() >= 3) {
          oracle_area += polygon_area(poly);
          for (const auto& p : poly) oracle_verts.push_back(p);
        }
      }
      REQUIRE(oracle_verts.size() > 0);
      CHECK(rel_err(mesh.total_area(), oracle_area) < 1e-9);
      for (const auto& v : mesh.verts)
        CHECK(min_dist(v, oracle_verts) < 1e-9);
      for (const auto& p : oracle_verts)
        CHECK(min_dist(p, mesh.verts) < 1e-9);

      // triangles face the rising side of the field
      for (const auto& t : mesh.tris) {
        Vec3 c = (mesh.verts[t[0]] + mesh.verts[t[1]] + mesh.verts[t[2]]) / 3;
        auto loc = cage.locate(c);
        REQUIRE(loc.has_value());
        Vec3 gradg = Vec3::Zero();
        for (int i = 0; i < 4; ++i)
          gradg += g[cage.tets[loc->element][i]] *
                   cage.shape_grads[loc->element].row(i).transpose();
        Vec3 n = tri_normal(mesh.verts[t[0]], mesh.verts[t[1]],
                            mesh.verts[t[2]]);
        CHECK(n.dot(gradg) > 0);
      }
    }
  }
}

TEST_CASE("trimming clips layers to the solid") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.2, 1);
  Eigen::MatrixXd xi = identity_field(cage);
  TriMesh layer = extract_layer(cage, xi, 4.0);

  // a solid that swallows the whole layer leaves it intact
  ImplicitSolid big = capsule_solid(50);
  TriMesh kept = trim_to_solid(layer, big);
  CHECK(kept.verts.size() == layer.verts.size());
  CHECK(kept.tris.size() == layer.tris.size());
  CHECK(rel_err(kept.total_area(), layer.total_area()) < 1e-12);

  // the real trim: a disc of the capsule radius
  TriMesh disc = trim_to_solid(layer, solid);
  CHECK(disc.total_area() < layer.total_area());
  CHECK(rel_err(disc.total_area(), M_PI * 9) < 0.01);
  double eps = 1e-6 * solid.bounds().diagonal();
  for (const auto& v : disc.verts) {
    CHECK(solid.value(v) <= eps * (1 + 1e-12));
    CHECK(std::abs(v.z() - 4.0) < 1e-9);  // trimming stays in the layer plane
  }

  // a layer entirely outside the solid vanishes
  TriMesh above = extract_layer(cage, xi, 11.9);
  REQUIRE(above.tris.size() > 0);
  TriMesh gone = trim_to_solid(above, solid);
  CHECK(gone.verts.empty());
  CHECK(gone.tris.empty());
}

TEST_CASE("slicing a capsule yields discs of the right size") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.2, 1);
  Eigen::MatrixXd xi = identity_field(cage);

  SliceResult res = slice_solid(cage, xi, solid, 0.4, 1.0);
  REQUIRE(res.layers.size() == res.plan.isos.size());
  REQUIRE(res.layers.size() >= 12);
  for (std::size_t i = 0; i < res.layers.size(); ++i) {
    CHECK(res.layers[i].iso == res.plan.isos[i]);
    CHECK(res.layers[i].area ==
          doctest::Approx(res.layers[i].mesh.total_area()).epsilon(1e-15));
  }
  for (const auto& layer : res.layers) {
    double z = layer.iso;
    double r2 = 9.0;  // cylinder body
    if (z < 0) r2 = 9.0 - z * z;
    if (z > 8) r2 = 9.0 - (z - 8) * (z - 8);
    if (r2 <= 0) continue;
    CHECK(rel_err(layer.area, M_PI * r2) < 0.05);
  }
}

TEST_CASE("exported layers reload with a faithful manifest") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.5, 1);
  Eigen::MatrixXd xi = identity_field(cage);
  SliceResult res = slice_solid(cage, xi, solid, 0.4, 1.2);

  TempDir td("layers");
  export_layers(res, td.path(), 0.4, 1.2);

  json manifest = json::parse(read_text_file(td.file("layers.json")));
  CHECK(manifest["count"].get<std::size_t>() == res.layers.size());
  CHECK(manifest["t_min"].get<double>() == 0.4);
  CHECK(manifest["t_max"].get<double>() == 1.2);
  CHECK(manifest["g_lo"].get<double>() == res.plan.g_lo);
  CHECK(manifest["g_hi"].get<double>() == res.plan.g_hi);
  REQUIRE(manifest["layers"].size() == res.layers.size());
  for (std::size_t i = 0; i < res.layers.size(); ++i) {
    const auto& entry = manifest["layers"][i];
    CHECK(entry["index"].get<std::size_t>() == i);
    CHECK(entry["iso"].get<double>() == res.layers[i].iso);
    CHECK(entry["area"].get<double>() == res.layers[i].area);
    CHECK(entry["triangles"].get<std::size_t>() == res.layers[i].mesh.tris.size());
    TriMesh back = load_obj(td.file(entry["file"].get<std::string>()));
    REQUIRE(back.verts.size() == res.layers[i].mesh.verts.size());
    REQUIRE(back.tris.size() == res.layers[i].mesh.tris.size());
    for (std::size_t v = 0; v < back.verts.size(); ++v)
      CHECK(back.verts[v] == res.layers[i].mesh.verts[v]);
  }
}

TEST_CASE("angle histograms bin and weigh violations") {
  // two elements: d0 = +z, d1 marked degenerate
  DeformationSystem::Directions dirs;
  dirs.d.resize(3, 2);
  dirs.d.col(0) = Vec3(0, 0, 1);
  dirs.d.col(1) = Vec3(0, 0, 1);
  dirs.grad_norm = {1.0, 0.0};
  dirs.degenerate = {0, 1};
  dirs.num_degenerate = 1;

  double alpha = 45.0 * M_PI / 180.0;
  std::vector<SurfaceSample> B(5);
  B[0].n = Vec3(0, 0, -1);  // 180 degrees: violating
  B[0].area = 2;
  B[1].n = Vec3(0, 0, 1);  // 0 degrees
  B[1].area = 3;
  double a100 = 100.0 * M_PI / 180.0;
  B[2].n = Vec3(std::sin(a100), 0, std::cos(a100));  // 100 deg, tolerated
  B[2].area = 5;
  for (int i = 0; i < 3; ++i) B[i].element = 0;
  B[3].n = Vec3(0, 0, -1);  // excluded from the loss: skipped here too
  B[3].area = 100;
  B[3].element = 0;
  B[3].excluded = true;
  B[4].n = Vec3(0, 0, -1);  // degenerate element: skipped
  B[4].area = 100;
  B[4].element = 1;

  AngleHistogram fh = facing_histogram(B, dirs, alpha);
  CHECK(fh.count.size() == 180);
  CHECK(fh.count[179] == 1);
  CHECK(fh.count[0] == 1);
  CHECK(fh.count[100] == 1);
  long total = 0;
  for (long c : fh.count) total += c;
  CHECK(total == 3);
  CHECK(fh.weight[179] == 2.0);
  CHECK(fh.violating_count_frac == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(fh.violating_weight_frac == doctest::Approx(0.2).epsilon(1e-15));

  double beta = 10.0 * M_PI / 180.0;
  std::vector<StressSample> T(4);
  T[0].tau = Vec3(1, 0, 0);  // in-plane
  T[0].volume = 1;
  T[1].tau = Vec3(0, 0, 1);  // straight out of plane: bin 89
  T[1].volume = 2;
  T[2].tau = Vec3(std::cos(M_PI / 6), 0, 0.5);  // 30 degrees off plane
  T[2].volume = 3;
  for (int i = 0; i < 3; ++i) T[i].element = 0;
  T[3].tau = Vec3(0, 0, 1);
  T[3].volume = 100;
  T[3].element = 1;  // degenerate: skipped

  AngleHistogram rh = reinforce_histogram(T, dirs, beta);
  CHECK(rh.count.size() == 90);
  CHECK(rh.count[0] == 1);
  CHECK(rh.count[89] == 1);
  CHECK(rh.count[30] == 1);
  CHECK(rh.violating_count_frac == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(rh.violating_weight_frac == doctest::Approx(5.0 / 6).epsilon(1e-15));

  TempDir td("hist");
  save_histogram_csv(rh, td.file("h.csv"));
  std::ifstream in(td.file("h.csv"));
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "bin_start_deg,count,weight");
  int rows = 0;
  while (std::getline(in, line)) {
    if (rows == 30) CHECK(line == "30,1,3");
    ++rows;
  }
  CHECK(rows == 90);
}

TEST_CASE("slicing is deterministic") {
  ImplicitSolid solid = capsule_solid();
  CageMesh cage = generate_cage(solid, 1.5, 1);
  Eigen::MatrixXd xi = identity_field(cage);

  TempDir td("det");
  for (int run = 0; run < 2; ++run) {
    SliceResult res = slice_solid(cage, xi, solid, 0.4, 1.2);
    export_layers(res, td.file("r" + std::to_string(run)), 0.4, 1.2);
  }
  for (const auto& entry :
       std::filesystem::directory_iterator(td.file("r0"))) {
    std::string name = entry.path().filename().string();
    CHECK(read_text_file(td.file("r0/" + name)) ==
          read_text_file(td.file("r1/" + name)));
  }
}
