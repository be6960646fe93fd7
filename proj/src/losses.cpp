#include "curvlayer/losses.hpp"

#include <cmath>

#include "curvlayer/errors.hpp"

namespace curvlayer {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double loss_reinforce(const std::vector<StressSample>& T,
                      const DeformationSystem::Directions& dirs,
                      const LossParams& p, Eigen::MatrixXd* dd,
                      int* degenerate) {
  const double sb = std::sin(p.beta);
  double loss = 0;
  for (const auto& t : T) {
    if (dirs.degenerate[t.element]) {
      if (degenerate) ++*degenerate;
      continue;
    }
    Vec3 d = dirs.d.col(t.element);
    double u = d.dot(t.tau);
    double s = sigmoid(p.k_sr * (std::abs(u) - sb));
    loss += t.volume * s;
    if (dd) {
      double sign = u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);
      dd->col(t.element) +=
          t.volume * s * (1 - s) * p.k_sr * sign * t.tau;
    }
  }
  return loss;
}

double loss_support_free(const std::vector<SurfaceSample>& B,
                         const DeformationSystem::Directions& dirs,
                         const LossParams& p, Eigen::MatrixXd* dd,
                         int* degenerate) {
  const double sa = std::sin(p.alpha);
  double loss = 0;
  for (const auto& b : B) {
    if (b.excluded) continue;
    if (dirs.degenerate[b.element]) {
      if (degenerate) ++*degenerate;
      continue;
    }
    Vec3 d = dirs.d.col(b.element);
    // a patch needs support when it faces against the print direction more
    // steeply than alpha: -n.d > sin(alpha)
    double c = -b.n.dot(d);
    double s = sigmoid(p.k_sf * (c - sa));
    loss += b.area * s;
    if (dd) dd->col(b.element) += b.area * s * (1 - s) * p.k_sf * (-b.n);
  }
  return loss;
}

double loss_overhang_min(const std::vector<SurfaceSample>& B,
                         const DeformationSystem::Directions& dirs,
                         Eigen::MatrixXd* dd, int* degenerate) {
  double loss = 0;
  for (const auto& b : B) {
    if (b.excluded || b.nbrs.empty()) continue;
    if (dirs.degenerate[b.element]) {
      if (degenerate) ++*degenerate;
      continue;
    }
    Vec3 d = dirs.d.col(b.element);
    // height of the lowest neighbor relative to p along d; positive for all
    // neighbors means p prints before its whole neighborhood
    double best = std::numeric_limits<double>::infinity();
    int best_j = -1;
    for (int j : b.nbrs) {
      double v = (B[j].p - b.p).dot(d);
      if (v < best) {
        best = v;
        best_j = j;
      }
    }
    if (best > 0) {
      loss += b.area * best;
      if (dd) dd->col(b.element) += b.area * (B[best_j].p - b.p);
    }
  }
  return loss;
}

double loss_clearance(const CageMesh& cage,
                      const DeformationSystem::Directions& dirs,
                      const LossParams& p, Eigen::MatrixXd* dd, int* skipped) {
  const double sphi = std::sin(p.phi);
  const bool wide = p.phi > M_PI / 2 + 1e-12;
  double loss = 0;
  for (const auto& pair : cage.pairs) {
    if (dirs.degenerate[pair.left] || dirs.degenerate[pair.right]) {
      if (skipped) ++*skipped;
      continue;
    }
    Vec3 nl = dirs.d.col(pair.left);
    Vec3 nr = dirs.d.col(pair.right);
    Vec3 cross_lr = nl.cross(nr);
    if (cross_lr.norm() < 1e-10) {
      // parallel directions carry no hinge; nothing to measure
      if (skipped) ++*skipped;
      continue;
    }
    Vec3 nbar = 0.5 * (nl + nr);
    Vec3 u = nbar.cross(pair.normal);
    double ulen = u.norm();
    if (ulen < 1e-10) {
      if (skipped) ++*skipped;
      continue;
    }
    Vec3 h = u / ulen;
    double t = cross_lr.dot(h);

    double gt = 0;
    if (wide) {
      // shallow head: only the one-sided bound survives
      if (t + sphi > 0) {
        loss += t + sphi;
        gt = 1;
      }
    } else {
      if (t > 0) {
        loss += t;
        gt += 1;
      }
      if (-t - sphi > 0) {
        loss += -t - sphi;
        gt -= 1;
      }
    }
    if (gt != 0 && dd) {
      Vec3 dh = gt * cross_lr;
      Vec3 du = (dh - h * h.dot(dh)) / ulen;
      Vec3 dnbar = pair.normal.cross(du);  // [f]x du = f x du
      dd->col(pair.left) += gt * nr.cross(h) + 0.5 * dnbar;
      dd->col(pair.right) += gt * h.cross(nl) + 0.5 * dnbar;
    }
  }
  return loss;
}

double loss_scale_smooth(const CageMesh& cage, const Eigen::MatrixXd& scale,
                         Eigen::MatrixXd* dscale) {
  double loss = 0;
  for (const auto& pair : cage.pairs) {
    double w = 0.5 * (cage.volumes[pair.left] + cage.volumes[pair.right]);
    Vec3 diff = scale.col(pair.left) - scale.col(pair.right);
    loss += w * diff.squaredNorm();
    if (dscale) {
      dscale->col(pair.left) += 2 * w * diff;
      dscale->col(pair.right) -= 2 * w * diff;
    }
  }
  return loss;
}

double loss_quat_smooth(const CageMesh& cage, const Eigen::MatrixXd& quat,
                        Eigen::MatrixXd* dquat) {
  // Note q and -q encode the same rotation but score as maximally different
  // here; the identity-start initialization keeps the field on one cover.
  double loss = 0;
  for (const auto& pair : cage.pairs) {
    double w = 0.5 * (cage.volumes[pair.left] + cage.volumes[pair.right]);
    double dot = quat.col(pair.left).dot(quat.col(pair.right));
    loss += w * (1 - dot) * (1 - dot);
    if (dquat) {
      double g = -2 * w * (1 - dot);
      dquat->col(pair.left) += g * quat.col(pair.right);
      dquat->col(pair.right) += g * quat.col(pair.left);
    }
  }
  return loss;
}

LossTerms eval_losses(const CageMesh& cage,
                      const DeformationSystem::Directions& dirs,
                      const Eigen::MatrixXd& quat,
                      const Eigen::MatrixXd& scale,
                      const std::vector<SurfaceSample>& B,
                      const std::vector<StressSample>& T, const LossParams& p,
                      LossGrads* grads) {
  if (grads) grads->set_zero(cage.num_tets());
  Eigen::MatrixXd* dd = grads ? &grads->d : nullptr;

  LossTerms t;
  t.sr = loss_reinforce(T, dirs, p, dd, &t.degenerate_elements);
  // weights fold into the accumulated gradients through scaled copies below,
  // so each term's own gradient is computed unweighted into a scratch buffer
  Eigen::MatrixXd scratch;
  auto weighted = [&](double w, auto&& fn) {
    double v;
    if (!grads) {
      v = fn(nullptr);
    } else {
      scratch = Eigen::MatrixXd::Zero(3, cage.num_tets());
      v = fn(&scratch);
      grads->d += w * scratch;
    }
    return v;
  };
  t.sf = weighted(p.w_sf, [&](Eigen::MatrixXd* g) {
    return loss_support_free(B, dirs, p, g, &t.degenerate_elements);
  });
  t.po = weighted(p.w_po, [&](Eigen::MatrixXd* g) {
    return loss_overhang_min(B, dirs, g, &t.degenerate_elements);
  });
  t.ca = loss_clearance(cage, dirs, p, nullptr, &t.skipped_pairs);

  if (grads) {
    Eigen::MatrixXd ds = Eigen::MatrixXd::Zero(3, cage.num_tets());
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(4, cage.num_tets());
    t.hs = loss_scale_smooth(cage, scale, &ds);
    t.hq = loss_quat_smooth(cage, quat, &dq);
    grads->scale += p.w_harmonic * ds;
    grads->quat += p.w_harmonic * dq;
  } else {
    t.hs = loss_scale_smooth(cage, scale, nullptr);
    t.hq = loss_quat_smooth(cage, quat, nullptr);
  }

  for (double v : {t.sr, t.sf, t.po, t.ca, t.hs, t.hq})
    if (!std::isfinite(v)) throw NumericalError("non-finite loss term");
  return t;
}

}  // namespace curvlayer
