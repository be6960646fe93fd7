#include "curvlayer/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "curvlayer/errors.hpp"

namespace curvlayer {

void AdamState::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                     double lr) {
  if (m.size() != grad.size()) reset(grad.size());
  ++t;
  m = beta1 * m + (1 - beta1) * grad;
  v = beta2 * v + (1 - beta2) * grad.cwiseProduct(grad);
  double c1 = 1 - std::pow(beta1, double(t));
  double c2 = 1 - std::pow(beta2, double(t));
  params -= (lr / c1) * m.cwiseQuotient(
                            ((v / c2).cwiseSqrt().array() + eps).matrix());
}

void PlateauScheduler::observe(double loss) {
  if (loss < best * (1 - threshold)) {
    best = loss;
    num_bad = 0;
  } else {
    ++num_bad;
  }
  if (num_bad > patience) {
    lr = std::max(lr * factor, lr_min);
    num_bad = 0;
  }
}

FieldOptimization::FieldOptimization(DeformationSystem& system,
                                     std::vector<SurfaceSample> B,
                                     std::vector<StressSample> T,
                                     LossParams loss_params)
    : system_(&system),
      B_(std::move(B)),
      T_(std::move(T)),
      params_(loss_params) {
  const CageMesh& cage = system.cage();
  centroids_ = cage.centroids;
  for (const auto& s : B_)
    if (s.element < 0 || s.element >= cage.num_tets())
      throw ConfigError("surface sample references a missing cage element");
  for (const auto& s : T_)
    if (s.element < 0 || s.element >= cage.num_tets())
      throw ConfigError("stress sample references a missing cage element");
}

FieldOptimization::Eval FieldOptimization::evaluate(
    const FieldNetwork& qnet, const FieldNetwork& snet) const {
  Eval ev;
  Eigen::MatrixXd quat = qnet.forward(centroids_);
  Eigen::MatrixXd scale = snet.forward(centroids_);
  ev.state = system_->deform(quat, scale);
  ev.dirs = system_->print_directions(ev.state);
  ev.terms = eval_losses(system_->cage(), ev.dirs, quat, scale, B_, T_,
                         params_, nullptr);
  return ev;
}

void FieldOptimization::backward_chain(
    const FieldNetwork& qnet, const FieldNetwork& snet,
    const FieldNetwork::Cache& qcache, const FieldNetwork::Cache& scache,
    const DeformationSystem::State& st,
    const DeformationSystem::Directions& dirs, const LossGrads& lg,
    Eigen::VectorXd& grad) const {
  Eigen::MatrixXd dxi =
      Eigen::MatrixXd::Zero(system_->cage().num_verts(), 3);
  system_->directions_backward(st, dirs, lg.d, dxi);

  Eigen::MatrixXd dquat, dscale;
  system_->backprop(st, dxi, dquat, dscale);
  dquat += lg.quat;
  dscale += lg.scale;

  grad.setZero(static_cast<Eigen::Index>(qnet.num_params()) +
               static_cast<Eigen::Index>(snet.num_params()));
  qnet.backward(qcache, dquat, grad.data());
  snet.backward(scache, dscale, grad.data() + qnet.num_params());
}

FieldOptimization::Eval FieldOptimization::evaluate_with_grad(
    const FieldNetwork& qnet, const FieldNetwork& snet,
    Eigen::VectorXd& grad) const {
  Eval ev;
  FieldNetwork::Cache qcache, scache;
  Eigen::MatrixXd quat = qnet.forward(centroids_, &qcache);
  Eigen::MatrixXd scale = snet.forward(centroids_, &scache);
  ev.state = system_->deform(quat, scale);
  ev.dirs = system_->print_directions(ev.state);
  LossGrads lg;
  ev.terms = eval_losses(system_->cage(), ev.dirs, quat, scale, B_, T_,
                         params_, &lg);
  for (uint8_t f : qcache.fallback) ev.quat_fallbacks += f;
  backward_chain(qnet, snet, qcache, scache, ev.state, ev.dirs, lg, grad);
  return ev;
}

double FieldOptimization::clearance_with_grad(const FieldNetwork& qnet,
                                              const FieldNetwork& snet,
                                              Eigen::VectorXd& grad,
                                              int* skipped) const {
  FieldNetwork::Cache qcache, scache;
  Eigen::MatrixXd quat = qnet.forward(centroids_, &qcache);
  Eigen::MatrixXd scale = snet.forward(centroids_, &scache);
  DeformationSystem::State st = system_->deform(quat, scale);
  DeformationSystem::Directions dirs = system_->print_directions(st);

  LossGrads lg;
  lg.set_zero(system_->cage().num_tets());
  int skip = 0;
  double ca = loss_clearance(system_->cage(), dirs, params_, &lg.d, &skip);
  if (skipped) *skipped = skip;
  if (!std::isfinite(ca)) throw NumericalError("non-finite clearance loss");
  backward_chain(qnet, snet, qcache, scache, st, dirs, lg, grad);
  return ca;
}

namespace {

void get_joint_params(const FieldNetwork& qnet, const FieldNetwork& snet,
                      Eigen::VectorXd& theta) {
  theta.resize(static_cast<Eigen::Index>(qnet.num_params() + snet.num_params()));
  qnet.get_params(theta.data());
  snet.get_params(theta.data() + qnet.num_params());
}

void set_joint_params(FieldNetwork& qnet, FieldNetwork& snet,
                      const Eigen::VectorXd& theta) {
  qnet.set_params(theta.data());
  snet.set_params(theta.data() + qnet.num_params());
}

}  // namespace

OptimizeResult run_optimize(FieldOptimization& opt, FieldNetwork& qnet,
                            FieldNetwork& snet, const TrainConfig& cfg,
                            const std::string& out_dir,
                            const std::string& resume_path) {
  AdamState adam;
  adam.beta1 = cfg.adam_beta1;
  adam.beta2 = cfg.adam_beta2;
  adam.eps = cfg.adam_eps;
  PlateauScheduler sched;
  sched.lr = cfg.lr;
  sched.factor = cfg.plateau_factor;
  sched.patience = cfg.plateau_patience;
  sched.threshold = cfg.plateau_threshold;
  sched.lr_min = cfg.lr_min;
  double conv_best = std::numeric_limits<double>::infinity();
  int conv_bad = 0;
  int start_epoch = 0;

  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    qnet = ck.qnet;
    snet = ck.snet;
    adam = ck.adam;
    sched = ck.sched;
    conv_best = ck.conv_best;
    conv_bad = ck.conv_bad;
    start_epoch = ck.epoch;
  }

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::string csv_path = out_dir + "/loss.csv";
    bool fresh = start_epoch == 0 || !std::filesystem::exists(csv_path);
    csv.open(csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh)
      csv << "epoch,objective,sr,sf,po,ca,hs,hq,lr,correction_steps,"
             "skipped_pairs,degenerate_elements\n";
  }
  auto write_checkpoint = [&](int epoch) {
    if (out_dir.empty()) return;
    Checkpoint ck;
    ck.qnet = qnet;
    ck.snet = snet;
    ck.adam = adam;
    ck.sched = sched;
    ck.conv_best = conv_best;
    ck.conv_bad = conv_bad;
    ck.epoch = epoch;
    save_checkpoint(ck, out_dir + "/checkpoint.bin");
  };

  OptimizeResult res;
  res.epochs_run = start_epoch;  // a resume past max_epochs trains nothing
  Eigen::VectorXd grad, theta;

  for (int epoch = start_epoch; epoch < cfg.max_epochs; ++epoch) {
    // constraint correction: descend the clearance term alone until it hits
    // zero or the step budget runs out
    int used = 0;
    {
      double step = cfg.correction_lr;
      double prev_ca = std::numeric_limits<double>::infinity();
      double best_ca = std::numeric_limits<double>::infinity();
      Eigen::VectorXd best_theta;
      int rises = 0;
      bool halved = false;
      for (int s = 0; s < cfg.correction_steps; ++s) {
        double ca = opt.clearance_with_grad(qnet, snet, grad);
        get_joint_params(qnet, snet, theta);
        if (ca < best_ca) {
          best_ca = ca;
          best_theta = theta;
        }
        if (ca == 0.0) break;
        if (ca > prev_ca) {
          if (++rises >= 3) {
            // diverging: back off to the best seen, halve the step once
            set_joint_params(qnet, snet, best_theta);
            get_joint_params(qnet, snet, theta);
            rises = 0;
            if (halved) break;
            halved = true;
            step *= 0.5;
          }
        } else {
          rises = 0;
        }
        prev_ca = ca;
        theta -= step * grad;
        set_joint_params(qnet, snet, theta);
        ++used;
      }
      // never leave the correction worse than its best iterate
      if (best_theta.size() > 0) {
        double ca_now = opt.clearance_with_grad(qnet, snet, grad);
        if (ca_now > best_ca) set_joint_params(qnet, snet, best_theta);
      }
    }

    FieldOptimization::Eval ev = opt.evaluate_with_grad(qnet, snet, grad);
    double objective = ev.terms.objective(opt.loss_params());
    if (!std::isfinite(objective))
      throw NumericalError("non-finite objective at epoch " +
                           std::to_string(epoch));

    get_joint_params(qnet, snet, theta);
    adam.step(theta, grad, sched.lr);
    set_joint_params(qnet, snet, theta);
    sched.observe(objective);

    EpochRow row;
    row.epoch = epoch;
    row.terms = ev.terms;
    row.objective = objective;
    row.lr = sched.lr;
    row.correction_used = used;
    res.history.push_back(row);
    if (csv.is_open()) {
      csv << epoch << ',' << format_double(objective) << ','
          << format_double(ev.terms.sr) << ',' << format_double(ev.terms.sf)
          << ',' << format_double(ev.terms.po) << ','
          << format_double(ev.terms.ca) << ',' << format_double(ev.terms.hs)
          << ',' << format_double(ev.terms.hq) << ','
          << format_double(sched.lr) << ',' << used << ','
          << ev.terms.skipped_pairs << ',' << ev.terms.degenerate_elements
          << '\n';
      csv.flush();
    }

    res.epochs_run = epoch + 1;
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      write_checkpoint(epoch + 1);

    if (objective < conv_best * (1 - cfg.convergence_threshold)) {
      conv_best = objective;
      conv_bad = 0;
    } else {
      ++conv_bad;
    }
    if (conv_bad >= cfg.convergence_patience && ev.terms.ca == 0.0) {
      res.converged = true;
      break;
    }
  }

  // the logged row reflects pre-step fields; measure the final state as left
  FieldOptimization::Eval final_ev = opt.evaluate(qnet, snet);
  res.final_terms = final_ev.terms;
  res.constraint_met = final_ev.terms.ca == 0.0;
  write_checkpoint(res.epochs_run);
  return res;
}

double pretrain_to_field(FieldOptimization& opt, FieldNetwork& qnet,
                         FieldNetwork& snet,
                         const std::vector<double>& vertex_target, int epochs,
                         double lr) {
  const CageMesh& cage = opt.system().cage();
  if (static_cast<int>(vertex_target.size()) != cage.num_verts())
    throw ConfigError("init field must give one value per cage vertex");

  const int nt = cage.num_tets();
  std::vector<double> target(nt);
  for (int e = 0; e < nt; ++e) {
    const auto& t = cage.tets[e];
    target[e] = 0.25 * (vertex_target[t[0]] + vertex_target[t[1]] +
                        vertex_target[t[2]] + vertex_target[t[3]]);
  }

  AdamState adam;
  Eigen::VectorXd grad, theta;
  double mse = 0;
  for (int it = 0; it < epochs; ++it) {
    FieldNetwork::Cache qcache, scache;
    Eigen::MatrixXd quat = qnet.forward(opt.centroids(), &qcache);
    Eigen::MatrixXd scale = snet.forward(opt.centroids(), &scache);
    DeformationSystem::State st = opt.system().deform(quat, scale);

    // G at a centroid is the mean deformed z of the element's vertices
    Eigen::MatrixXd dxi = Eigen::MatrixXd::Zero(cage.num_verts(), 3);
    mse = 0;
    for (int e = 0; e < nt; ++e) {
      const auto& t = cage.tets[e];
      double g = 0.25 * (st.xi(t[0], 2) + st.xi(t[1], 2) + st.xi(t[2], 2) +
                         st.xi(t[3], 2));
      double diff = g - target[e];
      mse += diff * diff / nt;
      double dg = 2.0 * diff / nt;
      for (int i = 0; i < 4; ++i) dxi(t[i], 2) += 0.25 * dg;
    }

    Eigen::MatrixXd dquat, dscale;
    opt.system().backprop(st, dxi, dquat, dscale);
    grad.setZero(
        static_cast<Eigen::Index>(qnet.num_params() + snet.num_params()));
    qnet.backward(qcache, dquat, grad.data());
    snet.backward(scache, dscale, grad.data() + qnet.num_params());

    get_joint_params(qnet, snet, theta);
    adam.step(theta, grad, lr);
    set_joint_params(qnet, snet, theta);
  }
  return mse;
}

namespace {
constexpr char kCkptMagic[8] = {'C', 'V', 'L', 'C', 'K', 'P', 'T', '1'};

void write_vec(std::ostream& out, const Eigen::VectorXd& v) {
  int64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * 8));
}
Eigen::VectorXd read_vec(std::istream& in) {
  int64_t n;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || n < 0 || n > (1ll << 32))
    throw ConfigError("corrupt checkpoint vector");
  Eigen::VectorXd v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * 8));
  if (!in) throw ConfigError("truncated checkpoint vector");
  return v;
}
}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out.write(kCkptMagic, 8);
  ck.qnet.serialize(out);
  ck.snet.serialize(out);
  int64_t t = ck.adam.t;
  out.write(reinterpret_cast<const char*>(&t), 8);
  out.write(reinterpret_cast<const char*>(&ck.adam.beta1), 8);
  out.write(reinterpret_cast<const char*>(&ck.adam.beta2), 8);
  out.write(reinterpret_cast<const char*>(&ck.adam.eps), 8);
  write_vec(out, ck.adam.m);
  write_vec(out, ck.adam.v);
  out.write(reinterpret_cast<const char*>(&ck.sched.lr), 8);
  out.write(reinterpret_cast<const char*>(&ck.sched.factor), 8);
  int64_t pat = ck.sched.patience;
  out.write(reinterpret_cast<const char*>(&pat), 8);
  out.write(reinterpret_cast<const char*>(&ck.sched.threshold), 8);
  out.write(reinterpret_cast<const char*>(&ck.sched.lr_min), 8);
  out.write(reinterpret_cast<const char*>(&ck.sched.best), 8);
  int64_t bad = ck.sched.num_bad;
  out.write(reinterpret_cast<const char*>(&bad), 8);
  out.write(reinterpret_cast<const char*>(&ck.conv_best), 8);
  int64_t cbad = ck.conv_bad, epoch = ck.epoch;
  out.write(reinterpret_cast<const char*>(&cbad), 8);
  out.write(reinterpret_cast<const char*>(&epoch), 8);
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw ConfigError("not a checkpoint file: " + path);
  Checkpoint ck;
  ck.qnet = FieldNetwork::deserialize(in);
  ck.snet = FieldNetwork::deserialize(in);
  int64_t t;
  in.read(reinterpret_cast<char*>(&t), 8);
  in.read(reinterpret_cast<char*>(&ck.adam.beta1), 8);
  in.read(reinterpret_cast<char*>(&ck.adam.beta2), 8);
  in.read(reinterpret_cast<char*>(&ck.adam.eps), 8);
  ck.adam.t = t;
  ck.adam.m = read_vec(in);
  ck.adam.v = read_vec(in);
  in.read(reinterpret_cast<char*>(&ck.sched.lr), 8);
  in.read(reinterpret_cast<char*>(&ck.sched.factor), 8);
  int64_t pat;
  in.read(reinterpret_cast<char*>(&pat), 8);
  in.read(reinterpret_cast<char*>(&ck.sched.threshold), 8);
  in.read(reinterpret_cast<char*>(&ck.sched.lr_min), 8);
  in.read(reinterpret_cast<char*>(&ck.sched.best), 8);
  int64_t bad;
  in.read(reinterpret_cast<char*>(&bad), 8);
  ck.sched.patience = static_cast<int>(pat);
  ck.sched.num_bad = static_cast<int>(bad);
  in.read(reinterpret_cast<char*>(&ck.conv_best), 8);
  int64_t cbad, epoch;
  in.read(reinterpret_cast<char*>(&cbad), 8);
  in.read(reinterpret_cast<char*>(&epoch), 8);
  if (!in) throw ConfigError("truncated checkpoint: " + path);
  ck.conv_bad = static_cast<int>(cbad);
  ck.epoch = static_cast<int>(epoch);
  return ck;
}

}  // namespace curvlayer
