#include "curvlayer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "curvlayer/cage.hpp"
#include "curvlayer/errors.hpp"
#include "curvlayer/implicit_solid.hpp"
#include "curvlayer/parallel.hpp"
#include "curvlayer/rng.hpp"
#include "curvlayer/sampling.hpp"
#include "curvlayer/slicer.hpp"

namespace curvlayer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDegToRad = M_PI / 180.0;
constexpr char kManifestName[] = "manifest.json";
constexpr char kFieldMagic[] = "CVLFLD1\n";

std::string resolve_path(const std::string& base_dir, const std::string& p) {
  fs::path fp(p);
  if (fp.is_absolute()) return p;
  return (fs::path(base_dir) / fp).string();
}

const json* find_key(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double num_or(const json& j, const char* key, double dflt) {
  const json* v = find_key(j, key);
  if (!v) return dflt;
  if (!v->is_number()) throw ConfigError(std::string(key) + " must be a number");
  return v->get<double>();
}

int int_or(const json& j, const char* key, int dflt) {
  const json* v = find_key(j, key);
  if (!v) return dflt;
  if (!v->is_number_integer())
    throw ConfigError(std::string(key) + " must be an integer");
  return v->get<int>();
}

std::string str_or(const json& j, const char* key, const std::string& dflt) {
  const json* v = find_key(j, key);
  if (!v) return dflt;
  if (!v->is_string()) throw ConfigError(std::string(key) + " must be a string");
  return v->get<std::string>();
}

void check_keys(const json& j, const char* section,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) known = true;
    if (!known)
      throw ConfigError(std::string("unknown key \"") + it.key() + "\" in " +
                        section);
  }
}

Aabb parse_box(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 6)
    throw ConfigError(std::string(what) +
                      " must be [x0, y0, z0, x1, y1, z1]");
  Aabb b;
  b.lo = Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
  b.hi = Vec3(j[3].get<double>(), j[4].get<double>(), j[5].get<double>());
  if (!b.valid()) throw ConfigError(std::string(what) + " has lo > hi");
  return b;
}

json box_to_json(const Aabb& b) {
  return json::array(
      {b.lo.x(), b.lo.y(), b.lo.z(), b.hi.x(), b.hi.y(), b.hi.z()});
}

void collect_mesh_files(const json& spec, const std::string& base_dir,
                        std::vector<std::string>& out) {
  if (spec.is_object()) {
    if (str_or(spec, "kind", "") == "mesh" && spec.contains("path"))
      out.push_back(resolve_path(base_dir, spec["path"].get<std::string>()));
    for (const auto& item : spec.items())
      collect_mesh_files(item.value(), base_dir, out);
  } else if (spec.is_array()) {
    for (const auto& v : spec) collect_mesh_files(v, base_dir, out);
  }
}

// One job at a time per output directory; the file vanishes on destruction.
class DirLock {
 public:
  explicit DirLock(const std::string& dir)
      : path_((fs::path(dir) / "job.lock").string()) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      if (fs::exists(path_))
        throw ConfigError("output directory is locked by another job (" +
                          path_ + "); remove the file if no job is running");
      throw ConfigError("cannot take the job lock " + path_ +
                        "; does the output directory exist?");
    }
    std::fputs("locked\n", f);
    std::fclose(f);
  }
  ~DirLock() { std::remove(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

void save_manifest(const std::string& out_dir, const json& m) {
  write_text_file((fs::path(out_dir) / kManifestName).string(),
                  m.dump(2) + "\n");
}

// Stage freshness: the stored stamp matches and every recorded file exists.
bool stage_fresh(const json& manifest, const char* stage,
                 const std::string& stamp, const std::string& out_dir) {
  const json* entry = find_key(manifest, stage);
  if (!entry || !entry->is_object()) return false;
  if (str_or(*entry, "stamp", "") != stamp) return false;
  const json* files = find_key(*entry, "files");
  if (!files) return false;
  for (const auto& item : files->items()) {
    if (!fs::exists(fs::path(out_dir) / item.value().get<std::string>()))
      return false;
  }
  return true;
}

void require_stage(const json& manifest, const char* stage,
                   const std::string& stamp, const std::string& out_dir) {
  if (!stage_fresh(manifest, stage, stamp, out_dir))
    throw ConfigError(std::string(stage) +
                      " artifacts are missing or stale; run the " + stage +
                      " stage first");
}

void save_xi(const Eigen::MatrixXd& xi, const std::string& path) {
  std::ostringstream out;
  out << "xi " << xi.rows() << "\n";
  for (Eigen::Index i = 0; i < xi.rows(); ++i)
    out << format_double(xi(i, 0)) << " " << format_double(xi(i, 1)) << " "
        << format_double(xi(i, 2)) << "\n";
  write_text_file(path, out.str());
}

Eigen::MatrixXd load_xi(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open control points: " + path);
  std::string tag;
  Eigen::Index n = 0;
  in >> tag >> n;
  if (tag != "xi" || n <= 0)
    throw ConfigError(path + ": not a control point file");
  Eigen::MatrixXd xi(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    in >> xi(i, 0) >> xi(i, 1) >> xi(i, 2);
  if (!in) throw ConfigError(path + ": truncated control point file");
  return xi;
}

std::vector<double> load_init_field(const std::string& path, int num_verts) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open init field: " + path);
  std::vector<double> vals;
  double v;
  while (in >> v) vals.push_back(v);
  if (static_cast<int>(vals.size()) != num_verts)
    throw ConfigError(path + ": expected one value per cage vertex (" +
                      std::to_string(num_verts) + "), got " +
                      std::to_string(vals.size()));
  return vals;
}

void save_fields(const FieldNetwork& qnet, const FieldNetwork& snet,
                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  out.write(kFieldMagic, 8);
  qnet.serialize(out);
  snet.serialize(out);
  if (!out) throw ConfigError("cannot write fields: " + path);
}

json terms_to_json(const LossTerms& t, const LossParams& p) {
  return json{{"objective", t.objective(p)}, {"sr", t.sr},     {"sf", t.sf},
              {"po", t.po},                  {"ca", t.ca},     {"hs", t.hs},
              {"hq", t.hq}};
}

struct PreprocessedData {
  CageMesh cage;
  std::vector<SurfaceSample> B;
  std::vector<StressSample> T;
};

PreprocessedData load_preprocessed(const JobConfig& cfg,
                                   const std::string& out_dir) {
  (void)cfg;
  fs::path dir(out_dir);
  PreprocessedData d;
  d.cage = load_cage((dir / "cage.txt").string());
  d.B = load_surface_samples((dir / "surface_samples.txt").string());
  d.T = load_stress_samples((dir / "stress_samples.txt").string());
  return d;
}

void set_network_frames(const CageMesh& cage, FieldNetwork& qnet,
                        FieldNetwork& snet) {
  Vec3 center = cage.box.center();
  double half_extent = 0.5 * cage.box.extent().maxCoeff();
  qnet.set_input_frame(center, half_extent);
  snet.set_input_frame(center, half_extent);
}

}  // namespace

JobConfig JobConfig::load(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse(j, fs::path(path).parent_path().string());
}

JobConfig JobConfig::parse(const json& j, const std::string& base_dir) {
  if (!j.is_object()) throw ConfigError("job config must be a JSON object");
  check_keys(j, "the config",
             {"solid", "cage", "surface", "samples", "stress", "field",
              "deformation", "loss", "train", "pretrain", "slice", "seed",
              "threads"});
  JobConfig cfg;
  cfg.base_dir = base_dir.empty() ? "." : base_dir;

  const json* solid = find_key(j, "solid");
  if (!solid || !solid->is_object())
    throw ConfigError("config needs a \"solid\" object");
  cfg.solid_spec = *solid;

  const json* cage = find_key(j, "cage");
  if (!cage || !cage->is_object())
    throw ConfigError("config needs a \"cage\" object with \"h\"");
  check_keys(*cage, "cage", {"h", "dilation"});
  cfg.cage_h = num_or(*cage, "h", 0);
  if (cfg.cage_h <= 0) throw ConfigError("cage.h must be positive");
  cfg.cage_dilation = int_or(*cage, "dilation", 2);
  if (cfg.cage_dilation < 0) throw ConfigError("cage.dilation must be >= 0");

  if (const json* surf = find_key(j, "surface")) {
    check_keys(*surf, "surface", {"h"});
    cfg.surface_h = num_or(*surf, "h", 0);
  }
  if (cfg.surface_h <= 0) cfg.surface_h = 0.5 * cfg.cage_h;

  if (const json* samples = find_key(j, "samples")) {
    check_keys(*samples, "samples", {"knn"});
    cfg.knn = int_or(*samples, "knn", cfg.knn);
    if (cfg.knn < 0) throw ConfigError("samples.knn must be >= 0");
  }

  if (const json* stress = find_key(j, "stress")) {
    check_keys(*stress, "stress", {"mode", "file", "fraction", "fea"});
    std::string mode = str_or(*stress, "mode", "none");
    if (mode == "none")
      cfg.stress_mode = StressMode::kNone;
    else if (mode == "fea")
      cfg.stress_mode = StressMode::kFea;
    else if (mode == "file")
      cfg.stress_mode = StressMode::kFile;
    else
      throw ConfigError("stress.mode must be none, fea or file");
    cfg.stress_fraction = num_or(*stress, "fraction", cfg.stress_fraction);
    if (cfg.stress_fraction <= 0 || cfg.stress_fraction > 1)
      throw ConfigError("stress.fraction must be in (0, 1]");
    if (cfg.stress_mode == StressMode::kFile) {
      cfg.stress_file = str_or(*stress, "file", "");
      if (cfg.stress_file.empty())
        throw ConfigError("stress.mode \"file\" needs stress.file");
    }
    if (cfg.stress_mode == StressMode::kFea) {
      const json* fea = find_key(*stress, "fea");
      if (!fea || !fea->is_object())
        throw ConfigError("stress.mode \"fea\" needs a stress.fea object");
      check_keys(*fea, "stress.fea",
                 {"voxel_h", "youngs", "poisson", "rel_tol", "max_iter",
                  "fixed", "loads"});
      cfg.fea_voxel_h = num_or(*fea, "voxel_h", 0);
      cfg.fea.youngs = num_or(*fea, "youngs", 3500.0);
      cfg.fea.poisson = num_or(*fea, "poisson", 0.35);
      cfg.fea.rel_tol = num_or(*fea, "rel_tol", cfg.fea.rel_tol);
      cfg.fea.max_iter = int_or(*fea, "max_iter", cfg.fea.max_iter);
      if (cfg.fea.youngs <= 0) throw ConfigError("fea.youngs must be positive");
      if (cfg.fea.poisson < 0 || cfg.fea.poisson >= 0.5)
        throw ConfigError("fea.poisson must be in [0, 0.5)");
      const json* fixed = find_key(*fea, "fixed");
      if (!fixed || !fixed->is_array() || fixed->empty())
        throw ConfigError("fea.fixed must list at least one box");
      for (const auto& b : *fixed)
        cfg.fea.fixed.push_back(parse_box(b, "fea.fixed entry"));
      const json* loads = find_key(*fea, "loads");
      if (!loads || !loads->is_array() || loads->empty())
        throw ConfigError("fea.loads must list at least one load");
      for (const auto& l : *loads) {
        if (!l.is_object() || !l.contains("box") || !l.contains("force"))
          throw ConfigError("each fea.loads entry needs box and force");
        const json& f = l["force"];
        if (!f.is_array() || f.size() != 3)
          throw ConfigError("fea load force must be [fx, fy, fz]");
        cfg.fea.loads.emplace_back(
            parse_box(l["box"], "fea load box"),
            Vec3(f[0].get<double>(), f[1].get<double>(), f[2].get<double>()));
      }
    }
  }
  if (cfg.fea_voxel_h <= 0) cfg.fea_voxel_h = cfg.surface_h;

  cfg.quat_net.head = FieldHead::kQuaternion;
  cfg.scale_net.head = FieldHead::kScale;
  if (const json* field = find_key(j, "field")) {
    check_keys(*field, "field",
               {"depth", "width", "omega0", "scale_min", "scale_max"});
    int depth = int_or(*field, "depth", 5);
    int width = int_or(*field, "width", 64);
    double omega0 = num_or(*field, "omega0", 30.0);
    if (depth < 1 || width < 1) throw ConfigError("field depth and width must be >= 1");
    if (omega0 <= 0) throw ConfigError("field.omega0 must be positive");
    cfg.quat_net.depth = cfg.scale_net.depth = depth;
    cfg.quat_net.width = cfg.scale_net.width = width;
    cfg.quat_net.omega0 = cfg.scale_net.omega0 = omega0;
    cfg.scale_net.scale_min = num_or(*field, "scale_min", 0.2);
    cfg.scale_net.scale_max = num_or(*field, "scale_max", 5.0);
    if (cfg.scale_net.scale_min <= 0 ||
        cfg.scale_net.scale_max <= cfg.scale_net.scale_min)
      throw ConfigError("need 0 < scale_min < scale_max");
  }

  if (const json* def = find_key(j, "deformation")) {
    check_keys(*def, "deformation", {"gamma"});
    cfg.gamma = num_or(*def, "gamma", cfg.gamma);
    if (cfg.gamma <= 0) throw ConfigError("deformation.gamma must be positive");
  }

  if (const json* loss = find_key(j, "loss")) {
    check_keys(*loss, "loss",
               {"alpha_deg", "beta_deg", "k_sf", "k_sr", "phi_deg", "w_sf",
                "w_po", "w_harmonic"});
    cfg.loss.alpha = num_or(*loss, "alpha_deg", 45.0) * kDegToRad;
    cfg.loss.beta = num_or(*loss, "beta_deg", 10.0) * kDegToRad;
    cfg.loss.k_sf = num_or(*loss, "k_sf", cfg.loss.k_sf);
    cfg.loss.k_sr = num_or(*loss, "k_sr", cfg.loss.k_sr);
    cfg.loss.phi = num_or(*loss, "phi_deg", 90.0) * kDegToRad;
    cfg.loss.w_sf = num_or(*loss, "w_sf", cfg.loss.w_sf);
    cfg.loss.w_po = num_or(*loss, "w_po", cfg.loss.w_po);
    cfg.loss.w_harmonic = num_or(*loss, "w_harmonic", cfg.loss.w_harmonic);
    if (cfg.loss.alpha <= 0 || cfg.loss.alpha >= M_PI / 2)
      throw ConfigError("loss.alpha_deg must be in (0, 90)");
    if (cfg.loss.beta <= 0 || cfg.loss.beta >= M_PI / 2)
      throw ConfigError("loss.beta_deg must be in (0, 90)");
    if (cfg.loss.phi <= 0 || cfg.loss.phi > M_PI)
      throw ConfigError("loss.phi_deg must be in (0, 180]");
  }

  if (const json* train = find_key(j, "train")) {
    check_keys(*train, "train",
               {"max_epochs", "lr", "lr_min", "plateau_patience",
                "plateau_factor", "plateau_threshold", "correction_steps",
                "correction_lr", "convergence_patience",
                "convergence_threshold", "checkpoint_every"});
    cfg.train.max_epochs = int_or(*train, "max_epochs", cfg.train.max_epochs);
    cfg.train.lr = num_or(*train, "lr", cfg.train.lr);
    cfg.train.lr_min = num_or(*train, "lr_min", cfg.train.lr_min);
    cfg.train.plateau_patience =
        int_or(*train, "plateau_patience", cfg.train.plateau_patience);
    cfg.train.plateau_factor =
        num_or(*train, "plateau_factor", cfg.train.plateau_factor);
    cfg.train.plateau_threshold =
        num_or(*train, "plateau_threshold", cfg.train.plateau_threshold);
    cfg.train.correction_steps =
        int_or(*train, "correction_steps", cfg.train.correction_steps);
    cfg.train.correction_lr =
        num_or(*train, "correction_lr", cfg.train.correction_lr);
    cfg.train.convergence_patience =
        int_or(*train, "convergence_patience", cfg.train.convergence_patience);
    cfg.train.convergence_threshold = num_or(
        *train, "convergence_threshold", cfg.train.convergence_threshold);
    cfg.train.checkpoint_every =
        int_or(*train, "checkpoint_every", cfg.train.checkpoint_every);
    if (cfg.train.max_epochs < 0) throw ConfigError("train.max_epochs must be >= 0");
    if (cfg.train.lr <= 0) throw ConfigError("train.lr must be positive");
  }

  if (const json* pre = find_key(j, "pretrain")) {
    check_keys(*pre, "pretrain", {"epochs", "lr"});
    cfg.pretrain_epochs = int_or(*pre, "epochs", cfg.pretrain_epochs);
    cfg.pretrain_lr = num_or(*pre, "lr", cfg.pretrain_lr);
  }

  if (const json* slice = find_key(j, "slice")) {
    check_keys(*slice, "slice", {"t_min", "t_max"});
    cfg.t_min = num_or(*slice, "t_min", cfg.t_min);
    cfg.t_max = num_or(*slice, "t_max", cfg.t_max);
  }
  if (!(cfg.t_min > 0) || !(cfg.t_max >= cfg.t_min))
    throw ConfigError("need 0 < t_min <= t_max");

  if (const json* seed = find_key(j, "seed")) {
    if (!seed->is_number_integer() || seed->get<int64_t>() < 0)
      throw ConfigError("seed must be a non-negative integer");
    cfg.seed = seed->get<uint64_t>();
  }
  cfg.threads = int_or(j, "threads", cfg.threads);
  return cfg;
}

StageStamps job_stamps(const JobConfig& cfg) {
  uint64_t solid_hash = fnv1a64(cfg.solid_spec.dump());
  std::vector<std::string> meshes;
  collect_mesh_files(cfg.solid_spec, cfg.base_dir, meshes);
  for (const auto& m : meshes) solid_hash = fnv1a64(read_text_file(m), solid_hash);

  json pre{{"solid", hex64(solid_hash)},
           {"cage_h", cfg.cage_h},
           {"dilation", cfg.cage_dilation},
           {"surface_h", cfg.surface_h},
           {"knn", cfg.knn},
           {"stress_mode", static_cast<int>(cfg.stress_mode)},
           {"fraction", cfg.stress_fraction}};
  if (cfg.stress_mode == StressMode::kFile)
    pre["stress_file"] = hex64(
        fnv1a64(read_text_file(resolve_path(cfg.base_dir, cfg.stress_file))));
  if (cfg.stress_mode == StressMode::kFea) {
    json fea{{"voxel_h", cfg.fea_voxel_h},
             {"youngs", cfg.fea.youngs},
             {"poisson", cfg.fea.poisson},
             {"rel_tol", cfg.fea.rel_tol},
             {"max_iter", cfg.fea.max_iter}};
    fea["fixed"] = json::array();
    for (const auto& b : cfg.fea.fixed) fea["fixed"].push_back(box_to_json(b));
    fea["loads"] = json::array();
    for (const auto& [box, force] : cfg.fea.loads)
      fea["loads"].push_back(json{
          {"box", box_to_json(box)},
          {"force", json::array({force.x(), force.y(), force.z()})}});
    pre["fea"] = fea;
  }
  StageStamps st;
  st.preprocess = hex64(fnv1a64(pre.dump()));

  json opt{{"pre", st.preprocess},
           {"depth", cfg.quat_net.depth},
           {"width", cfg.quat_net.width},
           {"omega0", cfg.quat_net.omega0},
           {"scale_min", cfg.scale_net.scale_min},
           {"scale_max", cfg.scale_net.scale_max},
           {"gamma", cfg.gamma},
           {"alpha", cfg.loss.alpha},
           {"beta", cfg.loss.beta},
           {"k_sf", cfg.loss.k_sf},
           {"k_sr", cfg.loss.k_sr},
           {"phi", cfg.loss.phi},
           {"w_sf", cfg.loss.w_sf},
           {"w_po", cfg.loss.w_po},
           {"w_harmonic", cfg.loss.w_harmonic},
           {"max_epochs", cfg.train.max_epochs},
           {"lr", cfg.train.lr},
           {"lr_min", cfg.train.lr_min},
           {"plateau",
            json::array({cfg.train.plateau_patience, cfg.train.plateau_factor,
                         cfg.train.plateau_threshold})},
           {"correction",
            json::array({cfg.train.correction_steps, cfg.train.correction_lr})},
           {"convergence",
            json::array({cfg.train.convergence_patience,
                         cfg.train.convergence_threshold})}};
  st.optimize = hex64(fnv1a64(opt.dump()));

  json sl{{"opt", st.optimize}, {"t_min", cfg.t_min}, {"t_max", cfg.t_max}};
  st.slice = hex64(fnv1a64(sl.dump()));
  return st;
}

json load_manifest(const std::string& out_dir) {
  fs::path p = fs::path(out_dir) / kManifestName;
  if (!fs::exists(p)) return json::object();
  try {
    json m = json::parse(read_text_file(p.string()));
    return m.is_object() ? m : json::object();
  } catch (const json::parse_error&) {
    return json::object();
  }
}

void preprocess_job(const JobConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  DirLock lock(out_dir);
  set_thread_count(cfg.threads);
  StageStamps stamps = job_stamps(cfg);
  json manifest = load_manifest(out_dir);
  if (stage_fresh(manifest, "preprocess", stamps.preprocess, out_dir)) return;

  ImplicitSolid solid = ImplicitSolid::from_json(cfg.solid_spec, cfg.base_dir);
  CageMesh cage = generate_cage(solid, cfg.cage_h, cfg.cage_dilation);
  fs::path dir(out_dir);
  save_cage(cage, (dir / "cage.txt").string());

  TriMesh surface = solid.extract_surface(cfg.surface_h);
  if (surface.tris.empty())
    throw ConfigError("the solid has no boundary at this surface resolution");
  save_obj(surface, (dir / "boundary.obj").string());
  std::vector<SurfaceSample> B = build_surface_samples(surface, cage, cfg.knn);
  save_surface_samples(B, (dir / "surface_samples.txt").string());

  json files{{"cage", "cage.txt"},
             {"surface", "boundary.obj"},
             {"surface_samples", "surface_samples.txt"},
             {"stress_samples", "stress_samples.txt"}};
  std::vector<StressSample> T;
  if (cfg.stress_mode == StressMode::kFea) {
    VoxelGrid vox = voxelize(solid, cfg.fea_voxel_h);
    FeaResult fea = solve_elasticity(vox, cfg.fea);
    save_stress_field(fea.stress, (dir / "stress_field.txt").string());
    files["stress_field"] = "stress_field.txt";
    T = build_stress_samples(fea.stress, cfg.stress_fraction, cage);
  } else if (cfg.stress_mode == StressMode::kFile) {
    StressField sf =
        load_stress_field(resolve_path(cfg.base_dir, cfg.stress_file));
    T = build_stress_samples(sf, cfg.stress_fraction, cage);
  }
  save_stress_samples(T, (dir / "stress_samples.txt").string());

  manifest["preprocess"] =
      json{{"stamp", stamps.preprocess},
           {"files", files},
           {"cage_verts", cage.num_verts()},
           {"cage_tets", cage.num_tets()},
           {"surface_samples", B.size()},
           {"stress_samples", T.size()}};
  manifest.erase("optimize");
  manifest.erase("slice");
  manifest.erase("report");
  save_manifest(out_dir, manifest);
}

OptimizeResult optimize_job(const JobConfig& cfg, const std::string& out_dir,
                            const OptimizeOptions& opts) {
  DirLock lock(out_dir);
  set_thread_count(cfg.threads);
  StageStamps stamps = job_stamps(cfg);
  json manifest = load_manifest(out_dir);
  require_stage(manifest, "preprocess", stamps.preprocess, out_dir);

  PreprocessedData data = load_preprocessed(cfg, out_dir);
  DeformationSystem system(data.cage, cfg.gamma);
  FieldOptimization opt(system, std::move(data.B), std::move(data.T),
                        cfg.loss);

  FieldNetwork qnet = FieldNetwork::init(cfg.quat_net, cfg.seed);
  FieldNetwork snet = FieldNetwork::init(cfg.scale_net, cfg.seed + 1);
  set_network_frames(data.cage, qnet, snet);

  fs::path dir(out_dir);
  std::string ckpt = (dir / "checkpoint.bin").string();
  std::string resume_path;
  if (opts.resume) {
    if (!fs::exists(ckpt))
      throw ConfigError("no checkpoint to resume from in " + out_dir);
    resume_path = ckpt;
  } else if (!opts.init_field.empty()) {
    std::vector<double> target =
        load_init_field(opts.init_field, data.cage.num_verts());
    pretrain_to_field(opt, qnet, snet, target, cfg.pretrain_epochs,
                      cfg.pretrain_lr);
  }

  OptimizeResult result =
      run_optimize(opt, qnet, snet, cfg.train, out_dir, resume_path);

  save_fields(qnet, snet, (dir / "field.bin").string());
  auto ev = opt.evaluate(qnet, snet);
  save_xi(ev.state.xi, (dir / "xi.txt").string());
  CageMesh deformed = system.cage();
  for (int i = 0; i < deformed.num_verts(); ++i)
    deformed.verts[i] = ev.state.xi.row(i).transpose();
  save_cage(deformed, (dir / "cage_deformed.txt").string());

  manifest = load_manifest(out_dir);
  manifest["optimize"] =
      json{{"stamp", stamps.optimize},
           {"seed", cfg.seed},
           {"epochs_run", result.epochs_run},
           {"converged", result.converged},
           {"constraint_met", result.constraint_met},
           {"final", terms_to_json(result.final_terms, cfg.loss)},
           {"files", json{{"field", "field.bin"},
                          {"checkpoint", "checkpoint.bin"},
                          {"loss", "loss.csv"},
                          {"xi", "xi.txt"},
                          {"cage_deformed", "cage_deformed.txt"}}}};
  manifest.erase("slice");
  manifest.erase("report");
  save_manifest(out_dir, manifest);
  return result;
}

SliceSummary slice_job(const JobConfig& cfg, const std::string& out_dir) {
  DirLock lock(out_dir);
  set_thread_count(cfg.threads);
  StageStamps stamps = job_stamps(cfg);
  json manifest = load_manifest(out_dir);
  require_stage(manifest, "preprocess", stamps.preprocess, out_dir);
  require_stage(manifest, "optimize", stamps.optimize, out_dir);

  ImplicitSolid solid = ImplicitSolid::from_json(cfg.solid_spec, cfg.base_dir);
  fs::path dir(out_dir);
  CageMesh cage = load_cage((dir / "cage.txt").string());
  Eigen::MatrixXd xi = load_xi((dir / "xi.txt").string());
  if (xi.rows() != cage.num_verts())
    throw ConfigError("control point count does not match the cage");

  SliceResult result = slice_solid(cage, xi, solid, cfg.t_min, cfg.t_max);
  export_layers(result, (dir / "layers").string(), cfg.t_min, cfg.t_max);

  SliceSummary summary;
  summary.num_layers = static_cast<int>(result.layers.size());
  summary.g_lo = result.plan.g_lo;
  summary.g_hi = result.plan.g_hi;
  manifest["slice"] = json{{"stamp", stamps.slice},
                           {"files", json{{"dir", "layers"},
                                          {"index", "layers/layers.json"}}},
                           {"num_layers", summary.num_layers},
                           {"g_lo", summary.g_lo},
                           {"g_hi", summary.g_hi}};
  manifest.erase("report");
  save_manifest(out_dir, manifest);
  return summary;
}

json report_job(const JobConfig& cfg, const std::string& out_dir) {
  DirLock lock(out_dir);
  set_thread_count(cfg.threads);
  StageStamps stamps = job_stamps(cfg);
  json manifest = load_manifest(out_dir);
  require_stage(manifest, "preprocess", stamps.preprocess, out_dir);
  require_stage(manifest, "optimize", stamps.optimize, out_dir);

  PreprocessedData data = load_preprocessed(cfg, out_dir);
  fs::path dir(out_dir);
  Eigen::MatrixXd xi = load_xi((dir / "xi.txt").string());
  if (xi.rows() != data.cage.num_verts())
    throw ConfigError("control point count does not match the cage");

  DeformationSystem system(data.cage, cfg.gamma);
  DeformationSystem::State st;
  st.xi = xi;
  DeformationSystem::Directions dirs = system.print_directions(st);

  AngleHistogram facing = facing_histogram(data.B, dirs, cfg.loss.alpha);
  AngleHistogram reinforce = reinforce_histogram(data.T, dirs, cfg.loss.beta);
  save_histogram_csv(facing, (dir / "facing_hist.csv").string());
  save_histogram_csv(reinforce, (dir / "reinforce_hist.csv").string());

  // sidecars carry everything needed to recompute the fractions
  {
    std::ostringstream out;
    out << "surface_directions " << data.B.size() << "\n";
    for (const auto& s : data.B) {
      const Vec3 d = dirs.d.col(s.element);
      out << format_double(s.p.x()) << " " << format_double(s.p.y()) << " "
          << format_double(s.p.z()) << " " << format_double(s.n.x()) << " "
          << format_double(s.n.y()) << " " << format_double(s.n.z()) << " "
          << format_double(s.area) << " " << s.element << " "
          << format_double(d.x()) << " " << format_double(d.y()) << " "
          << format_double(d.z()) << "\n";
    }
    write_text_file((dir / "directions_surface.txt").string(), out.str());
  }
  {
    std::ostringstream out;
    out << "stress_directions " << data.T.size() << "\n";
    for (const auto& s : data.T) {
      const Vec3 d = dirs.d.col(s.element);
      out << format_double(s.p.x()) << " " << format_double(s.p.y()) << " "
          << format_double(s.p.z()) << " " << format_double(s.tau.x()) << " "
          << format_double(s.tau.y()) << " " << format_double(s.tau.z()) << " "
          << format_double(s.volume) << " " << s.element << " "
          << format_double(d.x()) << " " << format_double(d.y()) << " "
          << format_double(d.z()) << "\n";
    }
    write_text_file((dir / "directions_stress.txt").string(), out.str());
  }

  json report{{"alpha_deg", cfg.loss.alpha / kDegToRad},
              {"beta_deg", cfg.loss.beta / kDegToRad},
              {"surface_samples", data.B.size()},
              {"stress_samples", data.T.size()},
              {"degenerate_elements", dirs.num_degenerate},
              {"sf_violating_count_frac", facing.violating_count_frac},
              {"sf_violating_weight_frac", facing.violating_weight_frac},
              {"sr_violating_count_frac", reinforce.violating_count_frac},
              {"sr_violating_weight_frac", reinforce.violating_weight_frac}};
  if (const json* opt = find_key(manifest, "optimize"))
    report["optimize"] = *opt;
  write_text_file((dir / "report.json").string(), report.dump(2) + "\n");

  manifest["report"] =
      json{{"stamp", stamps.optimize},
           {"files", json{{"report", "report.json"},
                          {"facing_hist", "facing_hist.csv"},
                          {"reinforce_hist", "reinforce_hist.csv"},
                          {"surface_directions", "directions_surface.txt"},
                          {"stress_directions", "directions_stress.txt"}}},
           {"sf_violating_weight_frac", facing.violating_weight_frac},
           {"sr_violating_weight_frac", reinforce.violating_weight_frac}};
  save_manifest(out_dir, manifest);
  return report;
}

namespace {

void perturb_params(FieldNetwork& net, uint64_t seed, double amp) {
  std::vector<double> p(net.num_params());
  net.get_params(p.data());
  Rng rng(seed);
  for (auto& v : p) v += rng.uniform(-amp, amp);
  net.set_params(p.data());
}

// Central difference of a scalar objective in one parameter, with a halved
// retry so a probe sitting near a hinge point is not misread as a gradient
// bug.
struct FdCheck {
  double max_rel = 0;
  int probes = 0;
};

FdCheck check_block(const std::function<double(const std::vector<double>&)>& f,
                    std::vector<double> theta, std::size_t begin,
                    std::size_t count, const Eigen::VectorXd& analytic,
                    std::size_t offset, uint64_t seed) {
  double gmax = 0;
  for (std::size_t i = 0; i < count; ++i)
    gmax = std::max(gmax, std::abs(analytic[offset + i]));
  const double floor = 1e-8 * (1.0 + gmax);

  // probe the strongest entries plus a spread across the block
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double va = std::abs(analytic[offset + a]), vb = std::abs(analytic[offset + b]);
    return va != vb ? va > vb : a < b;
  });
  std::vector<std::size_t> probes(order.begin(),
                                  order.begin() + std::min<std::size_t>(24, count));
  Rng rng(seed);
  for (int i = 0; i < 24 && count > 0; ++i)
    probes.push_back(rng.index(count));
  std::sort(probes.begin(), probes.end());
  probes.erase(std::unique(probes.begin(), probes.end()), probes.end());

  FdCheck out;
  for (std::size_t idx : probes) {
    const std::size_t k = begin + idx;
    const double an = analytic[offset + idx];
    double best = std::numeric_limits<double>::infinity();
    for (double h : {1e-5 * std::max(1.0, std::abs(theta[k])),
                     2.5e-6 * std::max(1.0, std::abs(theta[k]))}) {
      const double saved = theta[k];
      theta[k] = saved + h;
      const double fp = f(theta);
      theta[k] = saved - h;
      const double fm = f(theta);
      theta[k] = saved;
      const double fd = (fp - fm) / (2 * h);
      best = std::min(best, std::abs(fd - an) /
                                std::max({std::abs(fd), std::abs(an), floor}));
    }
    out.max_rel = std::max(out.max_rel, best);
    ++out.probes;
  }
  return out;
}

}  // namespace

bool gradcheck_job(const JobConfig& cfg, std::ostream& log) {
  set_thread_count(cfg.threads);
  ImplicitSolid solid = ImplicitSolid::from_json(cfg.solid_spec, cfg.base_dir);

  // coarsen until the cage is small enough for dense finite differencing
  CageMesh cage;
  {
    int best = std::numeric_limits<int>::max();
    double h = solid.bounds().diagonal() / 4.0;
    for (int i = 0; i < 40 && best > 200; ++i, h *= 1.15) {
      CageMesh c = generate_cage(solid, h, 0);
      if (c.num_tets() > 0 && c.num_tets() < best) {
        best = c.num_tets();
        cage = std::move(c);
      }
    }
    if (best > 200)
      throw ConfigError("gradcheck could not coarsen the cage below 200 tets");
  }

  double hs = solid.bounds().diagonal() / 8.0;
  TriMesh surf = solid.extract_surface(hs);
  for (int i = 0; i < 24 && static_cast<int>(surf.tris.size()) > 120; ++i) {
    hs *= 1.35;
    surf = solid.extract_surface(hs);
  }
  if (surf.tris.empty())
    throw ConfigError("gradcheck found no boundary surface");

  // samples built directly so a coarse boundary patch just outside the cage
  // is dropped rather than failing the whole check
  std::vector<SurfaceSample> B;
  for (const auto& t : surf.tris) {
    const Vec3 &a = surf.verts[t[0]], &b = surf.verts[t[1]],
               &c = surf.verts[t[2]];
    SurfaceSample s;
    s.p = (a + b + c) / 3.0;
    auto loc = cage.locate(s.p);
    if (!loc) continue;
    Vec3 n = tri_normal(a, b, c);
    if (n.norm() < 1e-14) continue;
    s.n = n.normalized();
    s.area = tri_area(a, b, c);
    s.element = loc->element;
    B.push_back(s);
  }
  if (B.size() > 100) {
    std::vector<SurfaceSample> kept;
    const std::size_t stride = (B.size() + 99) / 100;
    for (std::size_t i = 0; i < B.size(); i += stride)
      kept.push_back(B[i]);
    B = std::move(kept);
  }
  const int knn = std::min<int>(4, static_cast<int>(B.size()) - 1);
  for (std::size_t i = 0; i < B.size(); ++i) {
    std::vector<int> order;
    for (std::size_t j = 0; j < B.size(); ++j)
      if (j != i) order.push_back(static_cast<int>(j));
    std::sort(order.begin(), order.end(), [&](int x, int y) {
      double dx = (B[x].p - B[i].p).squaredNorm(),
             dy = (B[y].p - B[i].p).squaredNorm();
      return dx != dy ? dx < dy : x < y;
    });
    B[i].nbrs.assign(order.begin(), order.begin() + std::max(knn, 0));
  }

  // synthetic principal directions exercise the reinforcement path
  std::vector<StressSample> T;
  Rng trng(cfg.seed + 7);
  const int nT = std::min(cage.num_tets(), 40);
  for (int e = 0; e < nT; ++e) {
    StressSample s;
    s.p = cage.centroids[e];
    Vec3 t;
    do {
      t = Vec3(trng.uniform(-1, 1), trng.uniform(-1, 1), trng.uniform(-1, 1));
    } while (t.norm() < 1e-3);
    s.tau = t.normalized();
    s.volume = cage.volumes[e];
    s.element = e;
    T.push_back(s);
  }

  NetConfig qc = cfg.quat_net, sc = cfg.scale_net;
  qc.depth = sc.depth = 2;
  qc.width = sc.width = 32;
  FieldNetwork qnet = FieldNetwork::init(qc, cfg.seed);
  FieldNetwork snet = FieldNetwork::init(sc, cfg.seed + 1);
  set_network_frames(cage, qnet, snet);
  // move the heads off the identity point so every path is generic
  perturb_params(qnet, cfg.seed + 13, 0.05);
  perturb_params(snet, cfg.seed + 14, 0.05);

  DeformationSystem system(cage, cfg.gamma);
  const std::size_t nq = qnet.num_params(), ns = snet.num_params();
  std::vector<double> theta(nq + ns);
  qnet.get_params(theta.data());
  snet.get_params(theta.data() + nq);

  log << "gradcheck scene: " << cage.num_tets() << " tets, " << B.size()
      << " surface samples, " << T.size() << " stress samples, "
      << (nq + ns) << " parameters\n";

  const double tol = 1e-4;
  bool ok = true;
  uint64_t probe_seed = cfg.seed + 100;

  auto run_path = [&](const char* name, std::vector<SurfaceSample> Bp,
                      std::vector<StressSample> Tp, LossParams lp,
                      bool clearance) {
    FieldOptimization opt(system, std::move(Bp), std::move(Tp), lp);
    Eigen::VectorXd grad(nq + ns);
    double value;
    if (clearance) {
      value = opt.clearance_with_grad(qnet, snet, grad);
    } else {
      auto ev = opt.evaluate_with_grad(qnet, snet, grad);
      value = ev.terms.objective(lp);
    }
    auto objective = [&](const std::vector<double>& th) {
      FieldNetwork q2 = qnet, s2 = snet;
      q2.set_params(th.data());
      s2.set_params(th.data() + nq);
      auto ev = opt.evaluate(q2, s2);
      return clearance ? ev.terms.ca : ev.terms.objective(lp);
    };
    FdCheck fq = check_block(objective, theta, 0, nq, grad, 0, probe_seed++);
    FdCheck fs =
        check_block(objective, theta, nq, ns, grad, nq, probe_seed++);
    bool pass = fq.max_rel <= tol && fs.max_rel <= tol;
    log << "path " << name << ": value " << value << ", max rel err "
        << fq.max_rel << " (rotation net, " << fq.probes << " probes) "
        << fs.max_rel << " (scale net, " << fs.probes << " probes)  "
        << (pass ? "[ok]" : "[FAIL]") << "\n";
    ok = ok && pass;
    return std::array<double, 2>{fq.max_rel, fs.max_rel};
  };

  LossParams lp = cfg.loss;
  lp.w_harmonic = 0;
  run_path("SR", {}, T, lp, false);

  lp = cfg.loss;
  lp.w_po = 0;
  lp.w_harmonic = 0;
  lp.w_sf = 1;
  run_path("SF", B, {}, lp, false);

  lp = cfg.loss;
  lp.w_sf = 0;
  lp.w_harmonic = 0;
  lp.w_po = 1;
  run_path("PO", B, {}, lp, false);

  lp = cfg.loss;
  lp.w_harmonic = 1;
  auto harmonic = run_path("HQ+HS", {}, {}, lp, false);
  (void)harmonic;

  run_path("CA", {}, {}, cfg.loss, true);

  log << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return ok;
}

}  // namespace curvlayer
