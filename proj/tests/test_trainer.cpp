#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>

#include "curvlayer/errors.hpp"
#include "curvlayer/sampling.hpp"
#include "curvlayer/trainer.hpp"
#include "support/oracles.hpp"
#include "support/scenes.hpp"

using namespace curvlayer;
using namespace curvlayer::testing;
using nlohmann::json;

namespace {

// tiny capsule scene shared by the optimization tests
struct Scene {
  ImplicitSolid solid;
  CageMesh cage;
  std::vector<SurfaceSample> B;
  std::vector<StressSample> T;

  Scene()
      : solid(ImplicitSolid::from_json(json{{"kind", "capsule"},
                                            {"a", {0, 0, 0}},
                                            {"b", {0, 0, 8}},
                                            {"radius", 3}})) {
    cage = generate_cage(solid, 2.5, 1);
    TriMesh surf = solid.extract_surface(2.0);
    B = build_surface_samples(surf, cage, 6);
    // synthetic diagonal stress directions
    Rng rng(71);
    for (int e = 0; e < cage.num_tets(); e += 7) {
      StressSample s;
      s.p = cage.centroids[e];
      s.tau = Vec3(1, 0, 1).normalized();
      s.volume = cage.volumes[e];
      s.element = e;
      T.push_back(s);
    }
  }
};

NetConfig net_cfg(FieldHead head) {
  NetConfig cfg;
  cfg.head = head;
  cfg.depth = 2;
  cfg.width = 12;
  return cfg;
}

Eigen::VectorXd params_of(const FieldNetwork& net) {
  Eigen::VectorXd p(net.num_params());
  net.get_params(p.data());
  return p;
}

void perturb(FieldNetwork& net, uint64_t seed, double amp) {
  Eigen::VectorXd p = params_of(net);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += amp * rng.uniform(-1, 1);
  net.set_params(p.data());
}

}  // namespace

TEST_CASE("adam agrees with the reference implementation") {
  Rng rng(3);
  int n = 25;
  Eigen::VectorXd p1(n), p2(n);
  for (int i = 0; i < n; ++i) p1[i] = p2[i] = rng.uniform(-2, 2);

  AdamState adam;
  RefAdam ref;
  adam.reset(n);
  ref.reset(n);
  for (int it = 0; it < 50; ++it) {
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) g[i] = rng.uniform(-1, 1);
    adam.step(p1, g, 1e-2);
    ref.step(p2, g, 1e-2);
    CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK(adam.t == 50);
}

TEST_CASE("plateau scheduler halves after patience bad epochs") {
  PlateauScheduler sched;
  sched.lr = 1.0;
  sched.patience = 2;
  sched.threshold = 1e-2;
  sched.lr_min = 0.2;

  sched.observe(10.0);  // first observation sets best
  CHECK(sched.lr == 1.0);
  sched.observe(9.0);  // clear improvement
  CHECK(sched.best == 9.0);
  sched.observe(8.95);  // below threshold: bad 1
  sched.observe(8.95);  // bad 2
  CHECK(sched.lr == 1.0);  // patience not exceeded yet
  sched.observe(8.95);  // bad 3 > patience: halve, counter resets
  CHECK(sched.lr == 0.5);
  CHECK(sched.num_bad == 0);
  CHECK(sched.best == 9.0);  // best is not forgotten

  sched.observe(9.2);
  sched.observe(9.2);
  sched.observe(9.2);
  CHECK(sched.lr == 0.25);
  sched.observe(9.2);
  sched.observe(9.2);
  sched.observe(9.2);
  CHECK(sched.lr == 0.2);  // floored at lr_min

  sched.observe(0.5);  // big improvement still registers
  CHECK(sched.best == 0.5);
  CHECK(sched.num_bad == 0);
}

TEST_CASE("objective gradient survives a finite difference probe") {
  Scene sc;
  DeformationSystem sys(sc.cage, 1e-2);
  LossParams lp;
  FieldOptimization opt(sys, sc.B, sc.T, lp);

  FieldNetwork qnet = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 5);
  FieldNetwork snet = FieldNetwork::init(net_cfg(FieldHead::kScale), 6);
  Aabb box = sc.cage.box;
  qnet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  snet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  perturb(qnet, 13, 0.05);
  perturb(snet, 14, 0.05);

  Eigen::VectorXd grad;
  auto ev = opt.evaluate_with_grad(qnet, snet, grad);
  REQUIRE(grad.size() ==
          Eigen::Index(qnet.num_params() + snet.num_params()));
  CHECK(std::isfinite(ev.terms.objective(lp)));

  // probe the 12 largest entries with central differences
  std::vector<Eigen::Index> order(grad.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return std::abs(grad[a]) > std::abs(grad[b]);
  });
  Eigen::VectorXd q0 = params_of(qnet), s0 = params_of(snet);
  auto value = [&](Eigen::Index idx, double delta) {
    FieldNetwork q = qnet, s = snet;
    Eigen::VectorXd qp = q0, sp = s0;
    if (idx < q0.size())
      qp[idx] += delta;
    else
      sp[idx - q0.size()] += delta;
    q.set_params(qp.data());
    s.set_params(sp.data());
    return opt.evaluate(q, s).terms.objective(lp);
  };
  double gmax = grad.cwiseAbs().maxCoeff();
  for (int k = 0; k < 12; ++k) {
    Eigen::Index idx = order[k];
    double h = 1e-5;
    double fd = (value(idx, h) - value(idx, -h)) / (2 * h);
    CHECK(std::abs(fd - grad[idx]) <= 1e-4 * std::max(1.0, gmax));
  }
}

TEST_CASE("clearance gradient channel is consistent") {
  Scene sc;
  DeformationSystem sys(sc.cage, 1e-2);
  LossParams lp;
  FieldOptimization opt(sys, sc.B, sc.T, lp);

  FieldNetwork qnet = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 5);
  FieldNetwork snet = FieldNetwork::init(net_cfg(FieldHead::kScale), 6);
  perturb(qnet, 31, 0.08);
  perturb(snet, 32, 0.08);

  Eigen::VectorXd grad;
  int skipped = 0;
  double ca = opt.clearance_with_grad(qnet, snet, grad, &skipped);
  auto ev = opt.evaluate(qnet, snet);
  CHECK(ca == ev.terms.ca);
  CHECK(skipped == ev.terms.skipped_pairs);
  CHECK(grad.size() == Eigen::Index(qnet.num_params() + snet.num_params()));
  if (ca > 0) CHECK(grad.norm() > 0);
}

TEST_CASE("pretraining fits a target height field") {
  Scene sc;
  DeformationSystem sys(sc.cage, 1e-2);
  FieldOptimization opt(sys, sc.B, sc.T, LossParams{});

  FieldNetwork qnet = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 7);
  FieldNetwork snet = FieldNetwork::init(net_cfg(FieldHead::kScale), 8);
  Aabb box = sc.cage.box;
  qnet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  snet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());

  // stretch heights 1.5x about the mean; the mean itself is pinned by the
  // regularizer, so the target must preserve it to be reachable
  double zbar = 0;
  for (int i = 0; i < sc.cage.num_verts(); ++i)
    zbar += sc.cage.verts[i].z() / sc.cage.num_verts();
  std::vector<double> target(sc.cage.num_verts());
  for (int i = 0; i < sc.cage.num_verts(); ++i)
    target[i] = zbar + 1.5 * (sc.cage.verts[i].z() - zbar);
  double mse = pretrain_to_field(opt, qnet, snet, target, 400, 1e-2);
  CHECK(mse < 1e-3);

  auto ev = opt.evaluate(qnet, snet);
  // mean squared deviation of G from the target at the centroids
  double err = 0;
  for (int e = 0; e < sc.cage.num_tets(); ++e) {
    Vec3 c = sc.cage.centroids[e];
    double want = zbar + 1.5 * (c.z() - zbar);
    double g = 0;
    for (int k = 0; k < 4; ++k)
      g += 0.25 * ev.state.xi(sc.cage.tets[e][k], 2);
    err += (g - want) * (g - want);
  }
  err /= sc.cage.num_tets();
  CHECK(err < 1e-2);
}

TEST_CASE("checkpoints round trip bitwise") {
  Checkpoint ck;
  ck.qnet = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 11);
  ck.snet = FieldNetwork::init(net_cfg(FieldHead::kScale), 12);
  perturb(ck.qnet, 41, 0.1);
  ck.adam.reset(ck.qnet.num_params() + ck.snet.num_params());
  Rng rng(17);
  for (Eigen::Index i = 0; i < ck.adam.m.size(); ++i) {
    ck.adam.m[i] = rng.uniform(-1, 1);
    ck.adam.v[i] = rng.uniform(0, 1);
  }
  ck.adam.t = 37;
  ck.sched.lr = 3.25e-4;
  ck.sched.best = 0.125;
  ck.sched.num_bad = 4;
  ck.conv_best = 0.25;
  ck.conv_bad = 2;
  ck.epoch = 19;

  TempDir td("ck");
  save_checkpoint(ck, td.file("c.bin"));
  Checkpoint r = load_checkpoint(td.file("c.bin"));
  CHECK(params_of(r.qnet) == params_of(ck.qnet));
  CHECK(params_of(r.snet) == params_of(ck.snet));
  CHECK(r.adam.m == ck.adam.m);
  CHECK(r.adam.v == ck.adam.v);
  CHECK(r.adam.t == ck.adam.t);
  CHECK(r.sched.lr == ck.sched.lr);
  CHECK(r.sched.best == ck.sched.best);
  CHECK(r.sched.num_bad == ck.sched.num_bad);
  CHECK(r.conv_best == ck.conv_best);
  CHECK(r.conv_bad == ck.conv_bad);
  CHECK(r.epoch == ck.epoch);

  CHECK_THROWS_AS(load_checkpoint(td.file("missing.bin")), ConfigError);
}

TEST_CASE("resumed training matches an unbroken run bitwise") {
  Scene sc;
  DeformationSystem sys(sc.cage, 1e-2);
  LossParams lp;
  FieldOptimization opt(sys, sc.B, sc.T, lp);

  TrainConfig cfg;
  cfg.max_epochs = 4;
  cfg.checkpoint_every = 2;

  auto fresh = [&](FieldNetwork& q, FieldNetwork& s) {
    q = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 21);
    s = FieldNetwork::init(net_cfg(FieldHead::kScale), 22);
    Aabb box = sc.cage.box;
    q.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
    s.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  };

  TempDir a("run_a"), b("run_b");
  FieldNetwork q1, s1;
  fresh(q1, s1);
  OptimizeResult full = run_optimize(opt, q1, s1, cfg, a.path());
  REQUIRE(full.epochs_run == 4);

  FieldNetwork q2, s2;
  fresh(q2, s2);
  TrainConfig half = cfg;
  half.max_epochs = 2;
  run_optimize(opt, q2, s2, half, b.path());
  OptimizeResult tail = run_optimize(opt, q2, s2, cfg, b.path(),
                                     b.file("checkpoint.bin"));
  CHECK(tail.epochs_run == 4);

  CHECK(params_of(q2) == params_of(q1));
  CHECK(params_of(s2) == params_of(s1));
  // the log of the stitched run extends the first half identically
  std::ifstream fa(a.file("loss.csv")), fb(b.file("loss.csv"));
  std::string la, lb;
  int lines = 0;
  while (std::getline(fa, la)) {
    REQUIRE(std::getline(fb, lb));
    CHECK(la == lb);
    ++lines;
  }
  CHECK(lines == 5);  // header + 4 epochs
  CHECK(!std::getline(fb, lb));

  // history rows are well formed
  for (int e = 0; e < 4; ++e) {
    CHECK(full.history[e].epoch == e);
    CHECK(std::isfinite(full.history[e].objective));
    CHECK(full.history[e].lr > 0);
  }
}

TEST_CASE("correction steps engage on clearance violations") {
  Scene sc;
  DeformationSystem sys(sc.cage, 1e-2);
  LossParams lp;
  FieldOptimization opt(sys, sc.B, sc.T, lp);

  FieldNetwork qnet = FieldNetwork::init(net_cfg(FieldHead::kQuaternion), 51);
  FieldNetwork snet = FieldNetwork::init(net_cfg(FieldHead::kScale), 52);
  Aabb box = sc.cage.box;
  qnet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  snet.set_input_frame(box.center(), 0.5 * box.extent().maxCoeff());
  perturb(qnet, 61, 0.3);  // rough field with real hinge violations
  perturb(snet, 62, 0.3);

  double ca0 = opt.evaluate(qnet, snet).terms.ca;
  REQUIRE(ca0 > 0);

  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.checkpoint_every = 0;
  cfg.correction_steps = 5;
  cfg.correction_lr = 1e-3;
  OptimizeResult res = run_optimize(opt, qnet, snet, cfg);
  bool used = false;
  for (const auto& row : res.history) used |= row.correction_used > 0;
  CHECK(used);
  // the constraint pressure must not grow
  CHECK(res.final_terms.ca <= ca0);
}
