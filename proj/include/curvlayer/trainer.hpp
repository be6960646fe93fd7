#pragma once
#include <string>
#include <vector>

#include "curvlayer/deformation.hpp"
#include "curvlayer/field_network.hpp"
#include "curvlayer/losses.hpp"

namespace curvlayer {

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void reset(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }
  // bias-corrected update of params in place
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double lr);
};

// Halves the learning rate after `patience` epochs without relative
// improvement, bounded below by lr_min.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 0.5;
  int patience = 20;
  double threshold = 1e-4;  // relative
  double lr_min = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  int num_bad = 0;

  void observe(double loss);
};

// Bundles the differentiable chain: network forward at the element centroids,
// cage deformation, print directions, losses, and the reverse sweep back to
// network parameters. Gradient layout is [rotation net | scale net].
class FieldOptimization {
 public:
  FieldOptimization(DeformationSystem& system, std::vector<SurfaceSample> B,
                    std::vector<StressSample> T, LossParams loss_params);

  struct Eval {
    LossTerms terms;
    DeformationSystem::State state;
    DeformationSystem::Directions dirs;
    int quat_fallbacks = 0;
  };

  Eval evaluate(const FieldNetwork& qnet, const FieldNetwork& snet) const;
  // gradient of the soft objective (clearance excluded)
  Eval evaluate_with_grad(const FieldNetwork& qnet, const FieldNetwork& snet,
                          Eigen::VectorXd& grad) const;
  // clearance term alone, for the constraint-correction steps
  double clearance_with_grad(const FieldNetwork& qnet,
                             const FieldNetwork& snet, Eigen::VectorXd& grad,
                             int* skipped = nullptr) const;

  const DeformationSystem& system() const { return *system_; }
  const std::vector<SurfaceSample>& surface_samples() const { return B_; }
  const std::vector<StressSample>& stress_samples() const { return T_; }
  const LossParams& loss_params() const { return params_; }
  const std::vector<Vec3>& centroids() const { return centroids_; }

 private:
  void backward_chain(const FieldNetwork& qnet, const FieldNetwork& snet,
                      const FieldNetwork::Cache& qcache,
                      const FieldNetwork::Cache& scache,
                      const DeformationSystem::State& st,
                      const DeformationSystem::Directions& dirs,
                      const LossGrads& lg, Eigen::VectorXd& grad) const;

  DeformationSystem* system_;
  std::vector<SurfaceSample> B_;
  std::vector<StressSample> T_;
  LossParams params_;
  std::vector<Vec3> centroids_;
};

struct TrainConfig {
  int max_epochs = 500;
  double lr = 1e-3;
  double lr_min = 1e-6;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int plateau_patience = 20;
  double plateau_factor = 0.5;
  double plateau_threshold = 1e-4;
  int correction_steps = 5;      // constraint updates per epoch
  double correction_lr = 1e-3;
  int convergence_patience = 20;
  double convergence_threshold = 1e-4;
  int checkpoint_every = 50;
};

struct EpochRow {
  int epoch = 0;
  LossTerms terms;
  double objective = 0;
  double lr = 0;
  int correction_used = 0;
};

struct OptimizeResult {
  bool converged = false;      // plateau reached with the constraint met
  bool constraint_met = false; // final clearance exactly zero
  int epochs_run = 0;
  LossTerms final_terms;
  std::vector<EpochRow> history;
};

// Full-batch training loop. When out_dir is non-empty, appends loss.csv and
// writes a rolling checkpoint there. resume_path restarts from a checkpoint
// with bit-identical optimizer state.
OptimizeResult run_optimize(FieldOptimization& opt, FieldNetwork& qnet,
                            FieldNetwork& snet, const TrainConfig& cfg,
                            const std::string& out_dir = "",
                            const std::string& resume_path = "");

// Fits the deformed height function G at the element centroids to a target
// scalar given per cage vertex (interpolated to centroids). Returns the final
// mean squared error.
double pretrain_to_field(FieldOptimization& opt, FieldNetwork& qnet,
                         FieldNetwork& snet,
                         const std::vector<double>& vertex_target, int epochs,
                         double lr);

// checkpoint blob: both networks plus optimizer and scheduler state
struct Checkpoint {
  FieldNetwork qnet, snet;
  AdamState adam;
  PlateauScheduler sched;
  double conv_best = std::numeric_limits<double>::infinity();
  int conv_bad = 0;
  int epoch = 0;
};
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace curvlayer
