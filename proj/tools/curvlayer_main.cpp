#include <cstdint>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "curvlayer/errors.hpp"
#include "curvlayer/pipeline.hpp"

using namespace curvlayer;

namespace {

struct Args {
  std::string config;
  std::string out;
  int64_t seed = -1;
  int threads = -1;
  std::string init_field;
  bool resume = false;
};

void add_common(CLI::App* cmd, Args& a, bool needs_out) {
  cmd->add_option("--config", a.config, "job config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  if (needs_out)
    cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--threads", a.threads, "worker threads (0 = all cores)");
}

JobConfig load_config(const Args& a) {
  JobConfig cfg = JobConfig::load(a.config);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (a.threads >= 0) cfg.threads = a.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "curved-layer slicing driven by neural rotation and scale fields\n"
      "(config angles are degrees, lengths millimetres)"};
  app.require_subcommand(1);
  Args a;

  CLI::App* pre = app.add_subcommand(
      "preprocess", "build the cage, boundary samples and stress field");
  add_common(pre, a, true);

  CLI::App* opt = app.add_subcommand(
      "optimize", "train the deformation fields on the preprocessed scene");
  add_common(opt, a, true);
  opt->add_option("--seed", a.seed, "override the config seed");
  opt->add_option("--init-field", a.init_field,
                  "pre-fit the height field to per-cage-vertex values")
      ->check(CLI::ExistingFile);
  opt->add_flag("--resume", a.resume, "continue from the saved checkpoint");

  CLI::App* slc =
      app.add_subcommand("slice", "extract curved layers from the result");
  add_common(slc, a, true);

  CLI::App* rep = app.add_subcommand(
      "report", "angle histograms and violating fractions for the result");
  add_common(rep, a, true);

  CLI::App* chk = app.add_subcommand(
      "gradcheck", "finite-difference check of every loss gradient path");
  add_common(chk, a, false);
  chk->add_option("--seed", a.seed, "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    JobConfig cfg = load_config(a);
    if (app.got_subcommand(pre)) {
      preprocess_job(cfg, a.out);
      nlohmann::json m = load_manifest(a.out);
      const auto& p = m["preprocess"];
      std::cout << "preprocess: cage " << p["cage_tets"] << " tets, "
                << p["surface_samples"] << " surface samples, "
                << p["stress_samples"] << " stress samples\n";
    } else if (app.got_subcommand(opt)) {
      OptimizeOptions oo;
      oo.init_field = a.init_field;
      oo.resume = a.resume;
      OptimizeResult r = optimize_job(cfg, a.out, oo);
      std::cout << "optimize: " << r.epochs_run << " epochs, objective "
                << r.final_terms.objective(cfg.loss) << ", clearance "
                << r.final_terms.ca
                << (r.converged ? ", converged" : ", epoch limit") << "\n";
    } else if (app.got_subcommand(slc)) {
      SliceSummary s = slice_job(cfg, a.out);
      std::cout << "slice: " << s.num_layers << " layers over height ["
                << s.g_lo << ", " << s.g_hi << "]\n";
    } else if (app.got_subcommand(rep)) {
      nlohmann::json r = report_job(cfg, a.out);
      std::cout << "report: support-free violating fraction (by area) "
                << r["sf_violating_weight_frac"]
                << ", reinforcement violating fraction (by volume) "
                << r["sr_violating_weight_frac"] << "\n";
    } else if (app.got_subcommand(chk)) {
      if (!gradcheck_job(cfg, std::cout)) return kExitNumerical;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const PlanError& e) {
    std::cerr << "plan error: " << e.what() << "\n";
    return kExitPlan;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
}
