#pragma once
#include <string>
#include <vector>

#include "curvlayer/cage.hpp"
#include "curvlayer/deformation.hpp"
#include "curvlayer/implicit_solid.hpp"
#include "curvlayer/losses.hpp"

namespace curvlayer {

struct Layer {
  TriMesh mesh;  // trimmed to the solid
  double iso = 0;
  double area = 0;
};

struct SlicePlan {
  std::vector<double> isos;
  double g_lo = 0, g_hi = 0;
};

// Greedy iso-value schedule over the height field G (per-vertex deformed z).
// Each step advances by t_max times the smallest gradient magnitude among the
// solid-relevant elements the upcoming slab can touch, so the thickest point
// of every layer stays at or under t_max; throws PlanError (listing the
// steepest elements) when the thinnest point would fall below t_min.
SlicePlan pick_isovalues(const CageMesh& cage, const Eigen::MatrixXd& xi,
                         const ImplicitSolid& solid, double t_min,
                         double t_max);

// Marching tetrahedra over the cage at G = iso, in rest coordinates, welded,
// oriented toward increasing G.
TriMesh extract_layer(const CageMesh& cage, const Eigen::MatrixXd& xi,
                      double iso);

// Clips a layer against {H <= 0}. Crossing vertices are root-refined along
// the triangle edges until |H| <= 1e-6 * bbox diagonal, so they stay on the
// extracted surface; triangles whose edge midpoints disagree with the linear
// classification get one level of midpoint subdivision first. Every vertex of
// the result satisfies H <= the refinement tolerance.
TriMesh trim_to_solid(const TriMesh& layer, const ImplicitSolid& solid);

struct SliceResult {
  SlicePlan plan;
  std::vector<Layer> layers;  // one per iso, empty meshes retained
};
SliceResult slice_solid(const CageMesh& cage, const Eigen::MatrixXd& xi,
                        const ImplicitSolid& solid, double t_min, double t_max);

// layer_%03d.obj files plus a layers.json manifest
void export_layers(const SliceResult& result, const std::string& out_dir,
                   double t_min, double t_max);

// 1-degree angle histograms with count and weight columns.
struct AngleHistogram {
  double bin_deg = 1.0;
  std::vector<long> count;
  std::vector<double> weight;
  double violating_count_frac = 0;
  double violating_weight_frac = 0;
};

// angle(n, d) in [0, 180]; a patch violates when it faces against the print
// direction beyond alpha, i.e. angle > 90 + alpha
AngleHistogram facing_histogram(const std::vector<SurfaceSample>& B,
                                const DeformationSystem::Directions& dirs,
                                double alpha);
// asin|d . tau| in [0, 90]; violates when the principal stress leaves the
// layer plane by more than beta
AngleHistogram reinforce_histogram(const std::vector<StressSample>& T,
                                   const DeformationSystem::Directions& dirs,
                                   double beta);
void save_histogram_csv(const AngleHistogram& h, const std::string& path);

}  // namespace curvlayer
