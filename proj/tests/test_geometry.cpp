#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "curvlayer/geometry.hpp"
#include "curvlayer/rng.hpp"
#include "support/oracles.hpp"
#include "support/scenes.hpp"

using namespace curvlayer;
using namespace curvlayer::testing;

TEST_CASE("aabb basics") {
  Aabb b;
  CHECK(!b.valid());
  b.extend(Vec3(1, 2, 3));
  b.extend(Vec3(-1, 0, 5));
  CHECK(b.valid());
  CHECK(b.lo == Vec3(-1, 0, 3));
  CHECK(b.hi == Vec3(1, 2, 5));
  CHECK(b.center() == Vec3(0, 1, 4));
  CHECK(b.extent() == Vec3(2, 2, 2));
  CHECK(b.diagonal() == doctest::Approx(std::sqrt(12.0)));
  CHECK(b.contains(Vec3(0, 1, 4)));
  CHECK(!b.contains(Vec3(0, 1, 5.01)));
  CHECK(b.inflated(1).contains(Vec3(0, 1, 5.5)));
  CHECK(b.sq_distance(Vec3(0, 1, 4)) == 0);
  CHECK(b.sq_distance(Vec3(3, 1, 4)) == doctest::Approx(4.0));
  CHECK(b.sq_distance(Vec3(2, 3, 6)) == doctest::Approx(3.0));
}

TEST_CASE("triangle area and normal") {
  Vec3 a(0, 0, 0), b(2, 0, 0), c(0, 3, 0);
  CHECK(tri_area(a, b, c) == doctest::Approx(3.0));
  Vec3 n = tri_normal(a, b, c);
  CHECK(n.x() == 0);
  CHECK(n.y() == 0);
  CHECK(n.z() == doctest::Approx(6.0));  // twice the area
  // invariant under cyclic permutation, negated by a swap
  CHECK((tri_normal(b, c, a) - n).norm() == doctest::Approx(0.0));
  CHECK((tri_normal(a, c, b) + n).norm() == doctest::Approx(0.0));
}

TEST_CASE("closest point on triangle") {
  Vec3 a(0, 0, 0), b(4, 0, 0), c(0, 4, 0);
  // interior projection
  CHECK((closest_point_on_triangle(Vec3(1, 1, 5), a, b, c) - Vec3(1, 1, 0))
            .norm() == doctest::Approx(0.0));
  // vertex region
  CHECK((closest_point_on_triangle(Vec3(-2, -2, 1), a, b, c) - a).norm() ==
        doctest::Approx(0.0));
  // edge region
  CHECK((closest_point_on_triangle(Vec3(2, -3, 0), a, b, c) - Vec3(2, 0, 0))
            .norm() == doctest::Approx(0.0));

  // never beaten by a dense barycentric sweep
  Rng rng(11);
  for (int it = 0; it < 50; ++it) {
    Vec3 p(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-6, 6));
    double d = (closest_point_on_triangle(p, a, b, c) - p).norm();
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 60; ++i)
      for (int j = 0; i + j <= 60; ++j) {
        Vec3 q = a + (i / 60.0) * (b - a) + (j / 60.0) * (c - a);
        best = std::min(best, (q - p).norm());
      }
    CHECK(d <= best + 1e-9);
  }
}

TEST_CASE("obj round trip is bitwise") {
  TriMesh m = box_mesh(Vec3(-0.1, 0.3, -2), Vec3(1.7, 2.9, 0.5));
  Rng rng(3);
  for (auto& v : m.verts)
    v += 1e-3 * Vec3(rng.uniform(), rng.uniform(), rng.uniform());
  TempDir td("obj");
  save_obj(m, td.file("m.obj"));
  TriMesh r = load_obj(td.file("m.obj"));
  REQUIRE(r.verts.size() == m.verts.size());
  REQUIRE(r.tris.size() == m.tris.size());
  for (std::size_t i = 0; i < m.verts.size(); ++i)
    CHECK(r.verts[i] == m.verts[i]);
  for (std::size_t i = 0; i < m.tris.size(); ++i)
    CHECK(r.tris[i] == m.tris[i]);
  CHECK(m.total_area() == doctest::Approx(r.total_area()));
}

TEST_CASE("grid indexing is a bijection") {
  Grid3 g;
  g.origin = Vec3(1, 2, 3);
  g.h = 0.5;
  g.dims = Eigen::Vector3i(3, 4, 5);
  CHECK(g.num_cells() == 60);
  std::vector<char> seen(g.num_cells(), 0);
  for (int k = 0; k < 5; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 3; ++i) {
        auto idx = g.cell_index(i, j, k);
        REQUIRE(idx < g.num_cells());
        CHECK(!seen[idx]);
        seen[idx] = 1;
      }
  CHECK(g.cell_center(0, 0, 0) == Vec3(1.25, 2.25, 3.25));
  CHECK(g.node(1, 1, 1) == Vec3(1.5, 2.5, 3.5));
  CHECK(g.node_index(3, 4, 5) == 4 * 5 * 6 - 1);
}

TEST_CASE("fnv1a is deterministic and input sensitive") {
  const std::string abc = "abc";
  CHECK(fnv1a64(abc) == fnv1a64(abc));
  CHECK(fnv1a64(abc) != fnv1a64(std::string("abd")));
  CHECK(fnv1a64(abc) != fnv1a64(abc, fnv1a64(std::string("x"))));
  CHECK(fnv1a64(abc.data(), 3) == fnv1a64(abc));
  CHECK(hex64(0) == "0000000000000000");
  CHECK(hex64(0xdeadbeef12345678ull) == "deadbeef12345678");
}

TEST_CASE("format_double survives parsing") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    double v = std::ldexp(rng.uniform(-1, 1), int(rng.index(60)) - 30);
    CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
  }
  CHECK(format_double(0.1) == "0.10000000000000001");
}

TEST_CASE("text file round trip") {
  TempDir td("txt");
  write_text_file(td.file("a.txt"), "line1\nline2\n");
  CHECK(read_text_file(td.file("a.txt")) == "line1\nline2\n");
}
