#include "curvlayer/slicer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "curvlayer/errors.hpp"
#include "curvlayer/iso_surface.hpp"

namespace curvlayer {

namespace {

struct ElementRange {
  double g_min, g_max, grad;
  bool relevant;
};

std::vector<ElementRange> element_ranges(const CageMesh& cage,
                                         const Eigen::MatrixXd& xi,
                                         const ImplicitSolid& solid) {
  std::vector<ElementRange> out(cage.num_tets());
  for (int e = 0; e < cage.num_tets(); ++e) {
    const auto& t = cage.tets[e];
    double lo = xi(t[0], 2), hi = lo;
    double h_min = solid.value(cage.centroids[e]);
    for (int i = 0; i < 4; ++i) {
      lo = std::min(lo, xi(t[i], 2));
      hi = std::max(hi, xi(t[i], 2));
      h_min = std::min(h_min, solid.value(cage.verts[t[i]]));
    }
    Eigen::Vector4d z(xi(t[0], 2), xi(t[1], 2), xi(t[2], 2), xi(t[3], 2));
    Vec3 g = cage.shape_grads[e].transpose() * z;
    out[e] = {lo, hi, g.norm(), h_min <= 0};
  }
  return out;
}

}  // namespace

SlicePlan pick_isovalues(const CageMesh& cage, const Eigen::MatrixXd& xi,
                         const ImplicitSolid& solid, double t_min,
                         double t_max) {
  if (!(t_min > 0 && t_max >= t_min))
    throw ConfigError("layer thickness bounds must satisfy 0 < t_min <= t_max");

  auto ranges = element_ranges(cage, xi, solid);
  std::vector<int> relevant;
  for (int e = 0; e < cage.num_tets(); ++e)
    if (ranges[e].relevant) relevant.push_back(e);
  if (relevant.empty())
    throw PlanError("solid does not intersect any cage element");

  // inside-vertex heights bound the part of G the solid can reach
  double g_lo = std::numeric_limits<double>::infinity(), g_hi = -g_lo;
  for (int e : relevant) {
    const auto& t = cage.tets[e];
    bool any_inside = false;
    for (int i = 0; i < 4; ++i)
      if (solid.value(cage.verts[t[i]]) <= 0) {
        g_lo = std::min(g_lo, xi(t[i], 2));
        g_hi = std::max(g_hi, xi(t[i], 2));
        any_inside = true;
      }
    if (!any_inside) {  // solid pokes through without covering a vertex
      g_lo = std::min(g_lo, ranges[e].g_min);
      g_hi = std::max(g_hi, ranges[e].g_max);
    }
  }

  double grad_min = std::numeric_limits<double>::infinity(), grad_max = 0;
  std::vector<int> flat;
  for (int e : relevant) {
    if (ranges[e].grad < 1e-12) {
      if (flat.size() < 10) flat.push_back(e);
      continue;
    }
    grad_min = std::min(grad_min, ranges[e].grad);
    grad_max = std::max(grad_max, ranges[e].grad);
  }
  if (!flat.empty()) {
    std::ostringstream msg;
    msg << "height field is flat on solid-relevant elements:";
    for (int e : flat) msg << ' ' << e;
    throw PlanError(msg.str());
  }

  SlicePlan plan;
  plan.g_lo = g_lo;
  plan.g_hi = g_hi;
  double g = g_lo;
  bool first = true;
  while (true) {
    // the largest step any slab allows, then the binding constraint inside it
    double slab_hi = g + t_max * grad_max;
    double slab_min = std::numeric_limits<double>::infinity();
    double slab_max = 0;
    std::vector<int> steep;
    for (int e : relevant) {
      if (ranges[e].g_max < g || ranges[e].g_min > slab_hi) continue;
      slab_min = std::min(slab_min, ranges[e].grad);
      if (ranges[e].grad > slab_max) {
        slab_max = ranges[e].grad;
        steep.assign(1, e);
      } else if (ranges[e].grad == slab_max && steep.size() < 5) {
        steep.push_back(e);
      }
    }
    if (!std::isfinite(slab_min)) {  // gap in the height range
      slab_min = grad_min;
      slab_max = grad_max;
    }
    double step = t_max * slab_min;
    if (step / slab_max < t_min) {
      std::ostringstream msg;
      msg << "layer thickness range infeasible: slab at G=" << g
          << " spans gradient " << slab_min << ".." << slab_max
          << " so a " << t_max << " layer thins below " << t_min
          << "; steepest elements:";
      for (int e : steep) msg << ' ' << e;
      throw PlanError(msg.str());
    }
    g += first ? 0.5 * step : step;
    first = false;
    if (g > g_hi) break;
    plan.isos.push_back(g);
    if (plan.isos.size() > 100000)
      throw PlanError("layer count exploded past 100000; check the fields");
  }
  if (plan.isos.empty())
    throw PlanError("no layers fit between the height extremes");
  return plan;
}

TriMesh extract_layer(const CageMesh& cage, const Eigen::MatrixXd& xi,
                      double iso) {
  std::vector<double> values(cage.num_verts());
  for (int i = 0; i < cage.num_verts(); ++i) values[i] = xi(i, 2);
  double adj = nudged_iso(iso, values);
  IsoSurfaceBuilder builder(cage.verts, values, adj);
  for (int e = 0; e < cage.num_tets(); ++e) {
    builder.set_current_source(e);
    builder.add_tet(cage.tets[e]);
  }
  return builder.take_mesh();
}

namespace {

class TrimPool {
 public:
  TrimPool(const TriMesh& src, const ImplicitSolid& solid)
      : src_(src), solid_(solid), eps_(1e-6 * solid.bounds().diagonal()) {
    h_.assign(src.verts.size(), std::numeric_limits<double>::quiet_NaN());
  }

  double eps() const { return eps_; }

  double h_of(int v) {
    if (std::isnan(h_[v])) h_[v] = solid_.value(src_.verts[v]);
    return h_[v];
  }

  // output-mesh id of an original vertex
  int orig(int v) {
    auto [it, fresh] = orig_map_.try_emplace(v, -1);
    if (fresh) {
      it->second = static_cast<int>(out_.verts.size());
      out_.verts.push_back(src_.verts[v]);
    }
    return it->second;
  }

  // midpoint of original edge (for the subdivision pass)
  int midpoint(int a, int b) {
    if (a > b) std::swap(a, b);
    auto [it, fresh] = mid_map_.try_emplace(std::make_pair(a, b), -1);
    if (fresh) {
      it->second = static_cast<int>(out_.verts.size());
      out_.verts.push_back(0.5 * (src_.verts[a] + src_.verts[b]));
    }
    return it->second;
  }

  Vec3 position(int out_id) const { return out_.verts[out_id]; }

  // root of H along the segment between two output vertices, bisected until
  // |H| meets the tolerance; cached per sorted pair so shared edges weld
  int crossing(int out_a, int out_b, double ha, double hb) {
    int a = out_a, b = out_b;
    double va = ha, vb = hb;
    if (a > b) {
      std::swap(a, b);
      std::swap(va, vb);
    }
    auto [it, fresh] = cross_map_.try_emplace(std::make_pair(a, b), -1);
    if (fresh) {
      const Vec3 base = out_.verts[a];
      const Vec3 dir = out_.verts[b] - out_.verts[a];
      // keep t0 on the inside of the bracket
      double t0 = 0, t1 = 1;
      if (va > 0) std::swap(t0, t1);
      double tm = 0.5;
      for (int iter = 0; iter < 64; ++iter) {
        tm = 0.5 * (t0 + t1);
        double hm = solid_.value(base + tm * dir);
        if (std::abs(hm) <= eps_) break;
        (hm <= 0 ? t0 : t1) = tm;
      }
      it->second = static_cast<int>(out_.verts.size());
      out_.verts.push_back(base + tm * dir);
    }
    return it->second;
  }

  void add_triangle(int a, int b, int c) { out_.tris.push_back({a, b, c}); }
  TriMesh take() { return std::move(out_); }

 private:
  const TriMesh& src_;
  const ImplicitSolid& solid_;
  double eps_;
  std::vector<double> h_;
  TriMesh out_;
  std::map<int, int> orig_map_;
  std::map<std::pair<int, int>, int> mid_map_;
  std::map<std::pair<int, int>, int> cross_map_;
};

// Sutherland-Hodgman against {H <= 0} with curved-edge root refinement.
void clip_triangle(TrimPool& pool, const std::array<int, 3>& out_ids,
                   const std::array<double, 3>& h) {
  bool in[3];
  for (int i = 0; i < 3; ++i) in[i] = h[i] <= 0;
  int n_in = in[0] + in[1] + in[2];
  if (n_in == 0) return;
  if (n_in == 3) {
    pool.add_triangle(out_ids[0], out_ids[1], out_ids[2]);
    return;
  }
  std::vector<int> poly;
  for (int i = 0; i < 3; ++i) {
    int j = (i + 1) % 3;
    if (in[i]) poly.push_back(out_ids[i]);
    if (in[i] != in[j])
      poly.push_back(pool.crossing(out_ids[i], out_ids[j], h[i], h[j]));
  }
  for (std::size_t k = 1; k + 1 < poly.size(); ++k)
    pool.add_triangle(poly[0], poly[k], poly[k + 1]);
}

}  // namespace

TriMesh trim_to_solid(const TriMesh& layer, const ImplicitSolid& solid) {
  TrimPool pool(layer, solid);

  for (const auto& t : layer.tris) {
    double h[3];
    for (int i = 0; i < 3; ++i) h[i] = pool.h_of(t[i]);

    // midpoint agreement with the linear classification along each edge
    bool ambiguous = false;
    double hm[3];
    for (int i = 0; i < 3 && !ambiguous; ++i) {
      int j = (i + 1) % 3;
      Vec3 mid = 0.5 * (layer.verts[t[i]] + layer.verts[t[j]]);
      hm[i] = solid.value(mid);
      bool in_i = h[i] <= 0, in_j = h[j] <= 0, in_m = hm[i] <= 0;
      if (in_i == in_j && in_m != in_i) ambiguous = true;
    }

    if (!ambiguous) {
      clip_triangle(pool,
                    {pool.orig(t[0]), pool.orig(t[1]), pool.orig(t[2])},
                    {h[0], h[1], h[2]});
      continue;
    }
    // one level of midpoint refinement, then clip the four children
    for (int i = 0; i < 3; ++i) {
      int j = (i + 1) % 3;
      Vec3 mid = 0.5 * (layer.verts[t[i]] + layer.verts[t[j]]);
      hm[i] = solid.value(mid);
    }
    int m01 = pool.midpoint(t[0], t[1]);
    int m12 = pool.midpoint(t[1], t[2]);
    int m20 = pool.midpoint(t[2], t[0]);
    int v0 = pool.orig(t[0]), v1 = pool.orig(t[1]), v2 = pool.orig(t[2]);
    clip_triangle(pool, {v0, m01, m20}, {h[0], hm[0], hm[2]});
    clip_triangle(pool, {m01, v1, m12}, {hm[0], h[1], hm[1]});
    clip_triangle(pool, {m20, m12, v2}, {hm[2], hm[1], h[2]});
    clip_triangle(pool, {m01, m12, m20}, {hm[0], hm[1], hm[2]});
  }

  TriMesh out = pool.take();
  // drop stranded vertices so empty trims serialize empty
  std::vector<int> remap(out.verts.size(), -1);
  TriMesh packed;
  for (auto& t : out.tris) {
    for (int& v : t) {
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(packed.verts.size());
        packed.verts.push_back(out.verts[v]);
      }
      v = remap[v];
    }
    packed.tris.push_back(t);
  }
  return packed;
}

SliceResult slice_solid(const CageMesh& cage, const Eigen::MatrixXd& xi,
                        const ImplicitSolid& solid, double t_min,
                        double t_max) {
  SliceResult res;
  res.plan = pick_isovalues(cage, xi, solid, t_min, t_max);
  res.layers.reserve(res.plan.isos.size());
  for (double iso : res.plan.isos) {
    Layer layer;
    layer.iso = iso;
    layer.mesh = trim_to_solid(extract_layer(cage, xi, iso), solid);
    layer.area = layer.mesh.total_area();
    res.layers.push_back(std::move(layer));
  }
  return res;
}

void export_layers(const SliceResult& result, const std::string& out_dir,
                   double t_min, double t_max) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  nlohmann::ordered_json manifest;
  manifest["count"] = result.layers.size();
  manifest["t_min"] = t_min;
  manifest["t_max"] = t_max;
  manifest["g_lo"] = result.plan.g_lo;
  manifest["g_hi"] = result.plan.g_hi;
  manifest["layers"] = nlohmann::ordered_json::array();
  char name[32];
  for (std::size_t i = 0; i < result.layers.size(); ++i) {
    const Layer& layer = result.layers[i];
    std::snprintf(name, sizeof name, "layer_%03zu.obj", i);
    save_obj(layer.mesh, out_dir + "/" + name);
    nlohmann::ordered_json entry;
    entry["index"] = i;
    entry["iso"] = layer.iso;
    entry["file"] = name;
    entry["area"] = layer.area;
    entry["triangles"] = layer.mesh.tris.size();
    manifest["layers"].push_back(entry);
  }
  write_text_file(out_dir + "/layers.json", manifest.dump(2) + "\n");
}

AngleHistogram facing_histogram(const std::vector<SurfaceSample>& B,
                                const DeformationSystem::Directions& dirs,
                                double alpha) {
  AngleHistogram h;
  h.count.assign(180, 0);
  h.weight.assign(180, 0.0);
  double viol_c = 0, viol_w = 0, tot_c = 0, tot_w = 0;
  for (const auto& b : B) {
    if (b.excluded || dirs.degenerate[b.element]) continue;
    Vec3 d = dirs.d.col(b.element);
    double c = std::clamp(b.n.dot(d), -1.0, 1.0);
    double deg = std::acos(c) * 180.0 / M_PI;
    int bin = std::min(179, static_cast<int>(deg));
    h.count[bin] += 1;
    h.weight[bin] += b.area;
    tot_c += 1;
    tot_w += b.area;
    if (-b.n.dot(d) > std::sin(alpha)) {
      viol_c += 1;
      viol_w += b.area;
    }
  }
  h.violating_count_frac = tot_c > 0 ? viol_c / tot_c : 0;
  h.violating_weight_frac = tot_w > 0 ? viol_w / tot_w : 0;
  return h;
}

AngleHistogram reinforce_histogram(const std::vector<StressSample>& T,
                                   const DeformationSystem::Directions& dirs,
                                   double beta) {
  AngleHistogram h;
  h.count.assign(90, 0);
  h.weight.assign(90, 0.0);
  double viol_c = 0, viol_w = 0, tot_c = 0, tot_w = 0;
  for (const auto& t : T) {
    if (dirs.degenerate[t.element]) continue;
    Vec3 d = dirs.d.col(t.element);
    double s = std::clamp(std::abs(d.dot(t.tau)), 0.0, 1.0);
    double deg = std::asin(s) * 180.0 / M_PI;
    int bin = std::min(89, static_cast<int>(deg));
    h.count[bin] += 1;
    h.weight[bin] += t.volume;
    tot_c += 1;
    tot_w += t.volume;
    if (s > std::sin(beta)) {
      viol_c += 1;
      viol_w += t.volume;
    }
  }
  h.violating_count_frac = tot_c > 0 ? viol_c / tot_c : 0;
  h.violating_weight_frac = tot_w > 0 ? viol_w / tot_w : 0;
  return h;
}

void save_histogram_csv(const AngleHistogram& h, const std::string& path) {
  std::ostringstream out;
  out << "bin_start_deg,count,weight\n";
  for (std::size_t i = 0; i < h.count.size(); ++i)
    out << i << ',' << h.count[i] << ',' << format_double(h.weight[i]) << '\n';
  write_text_file(path, out.str());
}

}  // namespace curvlayer
