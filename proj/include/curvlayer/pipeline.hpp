#pragma once
#include <cstdint>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "curvlayer/field_network.hpp"
#include "curvlayer/losses.hpp"
#include "curvlayer/trainer.hpp"
#include "curvlayer/voxel_fea.hpp"

namespace curvlayer {

enum class StressMode { kNone, kFea, kFile };

// Job description: solid, discretization, loss constants, training and
// slicing settings. Angles in the file are degrees, lengths millimetres.
struct JobConfig {
  nlohmann::json solid_spec;
  std::string base_dir = ".";

  double cage_h = 0;  // required
  int cage_dilation = 2;
  double surface_h = 0;  // boundary sampling spacing, defaults to cage_h / 2

  StressMode stress_mode = StressMode::kNone;
  std::string stress_file;      // mode "file"
  double stress_fraction = 0.1; // critical-region share of occupied voxels
  double fea_voxel_h = 0;       // mode "fea", defaults to surface_h
  FeaSetup fea;

  NetConfig quat_net, scale_net;
  double gamma = 1e-2;
  LossParams loss;
  int knn = 8;

  TrainConfig train;
  int pretrain_epochs = 300;
  double pretrain_lr = 1e-3;

  double t_min = 0.4, t_max = 1.0;
  uint64_t seed = 1;
  int threads = 0;  // 0 = all cores

  static JobConfig load(const std::string& path);
  static JobConfig parse(const nlohmann::json& j, const std::string& base_dir);
};

// Content hashes chaining each stage to everything upstream of it: the solid
// spec (mesh files included), then the sampling settings, then the field and
// training settings. Stage outputs carry their stamp in manifest.json and a
// mismatch forces the stage to rerun.
struct StageStamps {
  std::string preprocess, optimize, slice;
};
StageStamps job_stamps(const JobConfig& cfg);

struct OptimizeOptions {
  std::string init_field;  // per-cage-vertex heights to pre-fit G against
  bool resume = false;
};

struct SliceSummary {
  int num_layers = 0;
  double g_lo = 0, g_hi = 0;
};

// Stage entry points. Each takes the output directory lock, validates the
// upstream stamps, writes its artifacts and updates manifest.json.
void preprocess_job(const JobConfig& cfg, const std::string& out_dir);
OptimizeResult optimize_job(const JobConfig& cfg, const std::string& out_dir,
                            const OptimizeOptions& opts = {});
SliceSummary slice_job(const JobConfig& cfg, const std::string& out_dir);
nlohmann::json report_job(const JobConfig& cfg, const std::string& out_dir);

// Finite-difference check of every loss gradient path on a coarsened version
// of the job's scene. Logs one line per path; true when all of them match.
bool gradcheck_job(const JobConfig& cfg, std::ostream& log);

nlohmann::json load_manifest(const std::string& out_dir);

}  // namespace curvlayer
