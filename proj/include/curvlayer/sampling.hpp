#pragma once
#include <string>
#include <vector>

#include "curvlayer/cage.hpp"
#include "curvlayer/losses.hpp"
#include "curvlayer/voxel_fea.hpp"

namespace curvlayer {

// One sample per surface triangle: centroid, area weight, outward normal,
// containing cage element, and the k nearest other samples (for the overhang
// minimum term). Throws ConfigError when a sample falls outside the cage.
std::vector<SurfaceSample> build_surface_samples(const TriMesh& surface,
                                                 const CageMesh& cage,
                                                 int knn);

// One sample per critical voxel: center, unit principal direction, voxel
// volume as weight. Cells with zero stress magnitude are dropped.
std::vector<StressSample> build_stress_samples(const StressField& stress,
                                               double fraction,
                                               const CageMesh& cage);

void save_surface_samples(const std::vector<SurfaceSample>& B,
                          const std::string& path);
std::vector<SurfaceSample> load_surface_samples(const std::string& path);

void save_stress_samples(const std::vector<StressSample>& T,
                         const std::string& path);
std::vector<StressSample> load_stress_samples(const std::string& path);

}  // namespace curvlayer
