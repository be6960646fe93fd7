#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "curvlayer/cage.hpp"
#include "curvlayer/errors.hpp"
#include "curvlayer/implicit_solid.hpp"
#include "curvlayer/pipeline.hpp"
#include "curvlayer/sampling.hpp"
#include "curvlayer/slicer.hpp"
#include "curvlayer/trainer.hpp"
#include "curvlayer/voxel_fea.hpp"

namespace py = pybind11;
using namespace curvlayer;

namespace {

Eigen::MatrixXd verts_matrix(const std::vector<Vec3>& verts) {
  Eigen::MatrixXd m(verts.size(), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) m.row(i) = verts[i];
  return m;
}

template <int N>
Eigen::MatrixXi index_matrix(const std::vector<std::array<int, N>>& idx) {
  Eigen::MatrixXi m(idx.size(), N);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < N; ++j) m(i, j) = idx[i][j];
  return m;
}

TriMesh mesh_from_arrays(const Eigen::MatrixXd& v, const Eigen::MatrixXi& f) {
  if (v.cols() != 3 || f.cols() != 3)
    throw ConfigError("vertices must be (n, 3) and faces (m, 3)");
  TriMesh mesh;
  mesh.verts.resize(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) mesh.verts[i] = v.row(i);
  mesh.tris.resize(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    mesh.tris[i] = {f(i, 0), f(i, 1), f(i, 2)};
  return mesh;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "curved-layer slicing by neural rotation and scale fields";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError",
                                         PyExc_RuntimeError);
  py::register_exception<PlanError>(m, "PlanError", PyExc_RuntimeError);

  py::class_<Aabb>(m, "Aabb")
      .def(py::init([](const Vec3& lo, const Vec3& hi) {
             Aabb b;
             b.lo = lo;
             b.hi = hi;
             return b;
           }),
           py::arg("lo"), py::arg("hi"))
      .def_readwrite("lo", &Aabb::lo)
      .def_readwrite("hi", &Aabb::hi)
      .def("diagonal", &Aabb::diagonal)
      .def("center", &Aabb::center);

  py::class_<TriMesh>(m, "TriMesh")
      .def(py::init(&mesh_from_arrays), py::arg("vertices"), py::arg("faces"))
      .def_property_readonly(
          "vertices", [](const TriMesh& t) { return verts_matrix(t.verts); })
      .def_property_readonly(
          "faces", [](const TriMesh& t) { return index_matrix<3>(t.tris); })
      .def("area", &TriMesh::total_area)
      .def("__len__", [](const TriMesh& t) { return t.tris.size(); });
  m.def("load_obj", &load_obj, py::arg("path"));
  m.def("save_obj", &save_obj, py::arg("mesh"), py::arg("path"));

  py::class_<ImplicitSolid>(m, "ImplicitSolid")
      .def_static("from_file", &ImplicitSolid::from_json_file, py::arg("path"))
      .def_static(
          "from_spec",
          [](const std::string& spec, const std::string& base_dir) {
            return ImplicitSolid::from_json(nlohmann::json::parse(spec),
                                            base_dir);
          },
          py::arg("spec"), py::arg("base_dir") = ".")
      .def("value", &ImplicitSolid::value, py::arg("p"))
      .def(
          "values",
          [](const ImplicitSolid& s, const Eigen::MatrixXd& pts) {
            Eigen::VectorXd out(pts.rows());
            for (Eigen::Index i = 0; i < pts.rows(); ++i)
              out[i] = s.value(pts.row(i).transpose());
            return out;
          },
          py::arg("points"))
      .def("gradient", &ImplicitSolid::gradient, py::arg("p"))
      .def_property_readonly("bounds", &ImplicitSolid::bounds)
      .def("extract_surface", &ImplicitSolid::extract_surface,
           py::arg("voxel_h"));

  py::class_<CageMesh>(m, "CageMesh")
      .def_property_readonly(
          "vertices", [](const CageMesh& c) { return verts_matrix(c.verts); })
      .def_property_readonly(
          "tets", [](const CageMesh& c) { return index_matrix<4>(c.tets); })
      .def_property_readonly("num_verts", &CageMesh::num_verts)
      .def_property_readonly("num_tets", &CageMesh::num_tets)
      .def_property_readonly(
          "volumes",
          [](const CageMesh& c) {
            return Eigen::Map<const Eigen::VectorXd>(c.volumes.data(),
                                                     c.volumes.size())
                .eval();
          })
      .def("locate", [](const CageMesh& c, const Vec3& p)
                         -> py::object {
        auto loc = c.locate(p);
        if (!loc) return py::none();
        return py::make_tuple(loc->element, loc->bary);
      });
  m.def("generate_cage", &generate_cage, py::arg("solid"), py::arg("voxel_h"),
        py::arg("dilation"));
  m.def("load_cage", &load_cage, py::arg("path"));
  m.def("save_cage", &save_cage, py::arg("cage"), py::arg("path"));

  py::class_<VoxelGrid>(m, "VoxelGrid")
      .def_property_readonly("num_occupied", &VoxelGrid::num_occupied)
      .def_property_readonly(
          "dims", [](const VoxelGrid& v) {
            return py::make_tuple(v.grid.dims.x(), v.grid.dims.y(),
                                  v.grid.dims.z());
          })
      .def_property_readonly("h", [](const VoxelGrid& v) { return v.grid.h; })
      .def_property_readonly(
          "origin", [](const VoxelGrid& v) { return v.grid.origin; });
  m.def("voxelize", &voxelize, py::arg("solid"), py::arg("voxel_h"));

  py::class_<StressField>(m, "StressField")
      .def_property_readonly(
          "sigma",
          [](const StressField& s) {
            Eigen::MatrixXd out(s.sigma.size(), 6);
            for (std::size_t i = 0; i < s.sigma.size(); ++i)
              out.row(i) = s.sigma[i];
            return out;
          })
      .def_property_readonly(
          "principal_mag",
          [](const StressField& s) {
            return Eigen::Map<const Eigen::VectorXd>(s.principal_mag.data(),
                                                     s.principal_mag.size())
                .eval();
          })
      .def_property_readonly(
          "principal_dir",
          [](const StressField& s) { return verts_matrix(s.principal_dir); });
  m.def("load_stress_field", &load_stress_field, py::arg("path"));
  m.def("save_stress_field", &save_stress_field, py::arg("field"),
        py::arg("path"));

  py::class_<FeaSetup>(m, "FeaSetup")
      .def(py::init<>())
      .def_readwrite("youngs", &FeaSetup::youngs)
      .def_readwrite("poisson", &FeaSetup::poisson)
      .def_readwrite("rel_tol", &FeaSetup::rel_tol)
      .def_readwrite("max_iter", &FeaSetup::max_iter)
      .def("fix_box",
           [](FeaSetup& s, const Vec3& lo, const Vec3& hi) {
             Aabb b;
             b.lo = lo;
             b.hi = hi;
             s.fixed.push_back(b);
           })
      .def("load_box", [](FeaSetup& s, const Vec3& lo, const Vec3& hi,
                          const Vec3& force) {
        Aabb b;
        b.lo = lo;
        b.hi = hi;
        s.loads.emplace_back(b, force);
      });

  py::class_<FeaResult>(m, "FeaResult")
      .def_readonly("stress", &FeaResult::stress)
      .def_readonly("iterations", &FeaResult::iterations)
      .def_readonly("residual", &FeaResult::residual)
      .def_readonly("load_sum", &FeaResult::load_sum)
      .def_readonly("reaction_sum", &FeaResult::reaction_sum)
      .def_property_readonly("displacement", [](const FeaResult& r) {
        Eigen::MatrixXd out(r.active_nodes.size(), 3);
        for (std::size_t i = 0; i < r.active_nodes.size(); ++i)
          out.row(i) << r.displacement[3 * i], r.displacement[3 * i + 1],
              r.displacement[3 * i + 2];
        return out;
      });
  m.def("solve_elasticity", &solve_elasticity, py::arg("voxels"),
        py::arg("setup"));

  py::class_<SurfaceSample>(m, "SurfaceSample")
      .def(py::init<>())
      .def_readwrite("p", &SurfaceSample::p)
      .def_readwrite("n", &SurfaceSample::n)
      .def_readwrite("area", &SurfaceSample::area)
      .def_readwrite("element", &SurfaceSample::element)
      .def_readwrite("nbrs", &SurfaceSample::nbrs)
      .def_readwrite("excluded", &SurfaceSample::excluded);
  py::class_<StressSample>(m, "StressSample")
      .def(py::init<>())
      .def_readwrite("p", &StressSample::p)
      .def_readwrite("tau", &StressSample::tau)
      .def_readwrite("volume", &StressSample::volume)
      .def_readwrite("element", &StressSample::element);
  m.def("build_surface_samples", &build_surface_samples, py::arg("surface"),
        py::arg("cage"), py::arg("knn"));
  m.def("build_stress_samples", &build_stress_samples, py::arg("stress"),
        py::arg("fraction"), py::arg("cage"));

  py::enum_<FieldHead>(m, "FieldHead")
      .value("quaternion", FieldHead::kQuaternion)
      .value("scale", FieldHead::kScale);
  py::class_<NetConfig>(m, "NetConfig")
      .def(py::init<>())
      .def_readwrite("head", &NetConfig::head)
      .def_readwrite("depth", &NetConfig::depth)
      .def_readwrite("width", &NetConfig::width)
      .def_readwrite("omega0", &NetConfig::omega0)
      .def_readwrite("scale_min", &NetConfig::scale_min)
      .def_readwrite("scale_max", &NetConfig::scale_max);
  py::class_<FieldNetwork>(m, "FieldNetwork")
      .def_static("init", &FieldNetwork::init, py::arg("config"),
                  py::arg("seed"))
      .def("set_input_frame", &FieldNetwork::set_input_frame,
           py::arg("center"), py::arg("half_extent"))
      .def_property_readonly("num_params", &FieldNetwork::num_params)
      .def("get_params",
           [](const FieldNetwork& n) {
             Eigen::VectorXd p(n.num_params());
             n.get_params(p.data());
             return p;
           })
      .def("set_params",
           [](FieldNetwork& n, const Eigen::VectorXd& p) {
             if (static_cast<std::size_t>(p.size()) != n.num_params())
               throw ConfigError("parameter vector has the wrong size");
             n.set_params(p.data());
           })
      .def(
          "forward",
          [](const FieldNetwork& n, const Eigen::MatrixXd& pts) {
            if (pts.cols() != 3) throw ConfigError("points must be (n, 3)");
            std::vector<Vec3> p(pts.rows());
            for (Eigen::Index i = 0; i < pts.rows(); ++i)
              p[i] = pts.row(i).transpose();
            return n.forward(p).transpose().eval();
          },
          py::arg("points"), "head outputs, one row per point");

  py::class_<DeformationSystem>(m, "DeformationSystem")
      .def(py::init<const CageMesh&, double>(), py::arg("cage"),
           py::arg("gamma"), py::keep_alive<1, 2>())
      .def("deform", &DeformationSystem::deform, py::arg("quat"),
           py::arg("scale"))
      .def("print_directions", &DeformationSystem::print_directions,
           py::arg("state"))
      .def("rest_positions", &DeformationSystem::rest_positions)
      .def_property_readonly("gamma", &DeformationSystem::gamma);
  py::class_<DeformationSystem::State>(m, "DeformState")
      .def_readonly("xi", &DeformationSystem::State::xi)
      .def_readonly("quat", &DeformationSystem::State::quat)
      .def_readonly("scale", &DeformationSystem::State::scale)
      .def_readonly("solve_residual", &DeformationSystem::State::solve_residual);
  py::class_<DeformationSystem::Directions>(m, "Directions")
      .def_readonly("d", &DeformationSystem::Directions::d)
      .def_readonly("num_degenerate",
                    &DeformationSystem::Directions::num_degenerate);

  py::class_<LossParams>(m, "LossParams")
      .def(py::init<>())
      .def_readwrite("alpha", &LossParams::alpha)
      .def_readwrite("beta", &LossParams::beta)
      .def_readwrite("k_sf", &LossParams::k_sf)
      .def_readwrite("k_sr", &LossParams::k_sr)
      .def_readwrite("phi", &LossParams::phi)
      .def_readwrite("w_sf", &LossParams::w_sf)
      .def_readwrite("w_po", &LossParams::w_po)
      .def_readwrite("w_harmonic", &LossParams::w_harmonic);
  py::class_<LossTerms>(m, "LossTerms")
      .def_readonly("sr", &LossTerms::sr)
      .def_readonly("sf", &LossTerms::sf)
      .def_readonly("po", &LossTerms::po)
      .def_readonly("ca", &LossTerms::ca)
      .def_readonly("hs", &LossTerms::hs)
      .def_readonly("hq", &LossTerms::hq)
      .def_readonly("skipped_pairs", &LossTerms::skipped_pairs)
      .def_readonly("degenerate_elements", &LossTerms::degenerate_elements)
      .def("objective", &LossTerms::objective, py::arg("params"));
  m.def("eval_losses",
        [](const CageMesh& cage, const DeformationSystem::Directions& dirs,
           const Eigen::MatrixXd& quat, const Eigen::MatrixXd& scale,
           const std::vector<SurfaceSample>& B,
           const std::vector<StressSample>& T, const LossParams& p) {
          return eval_losses(cage, dirs, quat, scale, B, T, p, nullptr);
        },
        py::arg("cage"), py::arg("dirs"), py::arg("quat"), py::arg("scale"),
        py::arg("B"), py::arg("T"), py::arg("params"));

  py::class_<FieldOptimization>(m, "FieldOptimization")
      .def(py::init<DeformationSystem&, std::vector<SurfaceSample>,
                    std::vector<StressSample>, LossParams>(),
           py::arg("system"), py::arg("B"), py::arg("T"), py::arg("params"),
           py::keep_alive<1, 2>())
      .def("evaluate",
           [](const FieldOptimization& o, const FieldNetwork& q,
              const FieldNetwork& s) { return o.evaluate(q, s).terms; });
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("lr_min", &TrainConfig::lr_min)
      .def_readwrite("plateau_patience", &TrainConfig::plateau_patience)
      .def_readwrite("plateau_factor", &TrainConfig::plateau_factor)
      .def_readwrite("correction_steps", &TrainConfig::correction_steps)
      .def_readwrite("correction_lr", &TrainConfig::correction_lr)
      .def_readwrite("convergence_patience", &TrainConfig::convergence_patience)
      .def_readwrite("checkpoint_every", &TrainConfig::checkpoint_every);
  py::class_<OptimizeResult>(m, "OptimizeResult")
      .def_readonly("converged", &OptimizeResult::converged)
      .def_readonly("constraint_met", &OptimizeResult::constraint_met)
      .def_readonly("epochs_run", &OptimizeResult::epochs_run)
      .def_readonly("final_terms", &OptimizeResult::final_terms);
  m.def("run_optimize", &run_optimize, py::arg("optimization"),
        py::arg("quat_net"), py::arg("scale_net"), py::arg("config"),
        py::arg("out_dir") = "", py::arg("resume_path") = "");

  py::class_<Layer>(m, "Layer")
      .def_readonly("mesh", &Layer::mesh)
      .def_readonly("iso", &Layer::iso)
      .def_readonly("area", &Layer::area);
  py::class_<SlicePlan>(m, "SlicePlan")
      .def_readonly("isos", &SlicePlan::isos)
      .def_readonly("g_lo", &SlicePlan::g_lo)
      .def_readonly("g_hi", &SlicePlan::g_hi);
  py::class_<SliceResult>(m, "SliceResult")
      .def_readonly("plan", &SliceResult::plan)
      .def_readonly("layers", &SliceResult::layers);
  m.def("slice_solid", &slice_solid, py::arg("cage"), py::arg("xi"),
        py::arg("solid"), py::arg("t_min"), py::arg("t_max"));
  m.def("extract_layer", &extract_layer, py::arg("cage"), py::arg("xi"),
        py::arg("iso"));
  m.def("trim_to_solid", &trim_to_solid, py::arg("layer"), py::arg("solid"));
  m.def("export_layers", &export_layers, py::arg("result"), py::arg("out_dir"),
        py::arg("t_min"), py::arg("t_max"));

  py::class_<JobConfig>(m, "JobConfig")
      .def_static("load", &JobConfig::load, py::arg("path"))
      .def_static(
          "parse",
          [](const std::string& text, const std::string& base_dir) {
            return JobConfig::parse(nlohmann::json::parse(text), base_dir);
          },
          py::arg("text"), py::arg("base_dir") = ".")
      .def_readwrite("seed", &JobConfig::seed)
      .def_readwrite("threads", &JobConfig::threads)
      .def_readwrite("cage_h", &JobConfig::cage_h)
      .def_readwrite("t_min", &JobConfig::t_min)
      .def_readwrite("t_max", &JobConfig::t_max);
  py::class_<OptimizeOptions>(m, "OptimizeOptions")
      .def(py::init<>())
      .def_readwrite("init_field", &OptimizeOptions::init_field)
      .def_readwrite("resume", &OptimizeOptions::resume);
  py::class_<SliceSummary>(m, "SliceSummary")
      .def_readonly("num_layers", &SliceSummary::num_layers)
      .def_readonly("g_lo", &SliceSummary::g_lo)
      .def_readonly("g_hi", &SliceSummary::g_hi);
  m.def("preprocess_job", &preprocess_job, py::arg("config"),
        py::arg("out_dir"));
  m.def("optimize_job", &optimize_job, py::arg("config"), py::arg("out_dir"),
        py::arg("options") = OptimizeOptions());
  m.def("slice_job", &slice_job, py::arg("config"), py::arg("out_dir"));
  m.def(
      "report_job",
      [](const JobConfig& cfg, const std::string& out_dir) {
        return report_job(cfg, out_dir).dump();
      },
      py::arg("config"), py::arg("out_dir"), "returns the report as JSON text");
  m.def(
      "gradcheck_job",
      [](const JobConfig& cfg) {
        std::ostringstream log;
        bool ok = gradcheck_job(cfg, log);
        return py::make_tuple(ok, log.str());
      },
      py::arg("config"));
}
