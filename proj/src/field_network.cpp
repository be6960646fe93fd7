#include "curvlayer/field_network.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "curvlayer/errors.hpp"
#include "curvlayer/rng.hpp"

namespace curvlayer {

namespace {
constexpr double kQuatNormGuard = 1e-8;

void write_raw(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void read_raw(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw ConfigError("truncated network block");
}
}  // namespace

FieldNetwork FieldNetwork::init(const NetConfig& cfg, uint64_t seed) {
  if (cfg.depth < 1 || cfg.width < 1)
    throw ConfigError("network depth and width must be positive");
  if (!(cfg.scale_min > 0 && cfg.scale_max > cfg.scale_min))
    throw ConfigError("scale clamp bounds must satisfy 0 < min < max");
  FieldNetwork net;
  net.cfg_ = cfg;
  Rng rng(seed);

  const int out = cfg.head == FieldHead::kQuaternion ? 4 : 3;
  for (int l = 0; l <= cfg.depth; ++l) {
    int rows = l == cfg.depth ? out : cfg.width;
    int cols = l == 0 ? 3 : cfg.width;
    Eigen::MatrixXd W(rows, cols);
    double bound;
    if (l == 0)
      bound = 1.0 / 3.0;  // 1 / fan_in on the input layer
    else
      bound = std::sqrt(6.0 / cols) / cfg.omega0;
    if (l == cfg.depth) bound = 0.0;  // identity start
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        W(r, c) = bound == 0 ? 0.0 : rng.uniform(-bound, bound);
    net.W_.push_back(std::move(W));
    Eigen::VectorXd b = Eigen::VectorXd::Zero(rows);
    if (l == cfg.depth && cfg.head == FieldHead::kQuaternion) b[0] = 1.0;
    net.b_.push_back(std::move(b));
  }
  return net;
}

void FieldNetwork::set_input_frame(const Vec3& center, double half_extent) {
  if (!(half_extent > 0)) throw ConfigError("input frame extent must be > 0");
  center_ = center;
  half_extent_ = half_extent;
}

std::size_t FieldNetwork::num_params() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < W_.size(); ++l)
    n += static_cast<std::size_t>(W_[l].size()) + b_[l].size();
  return n;
}

void FieldNetwork::get_params(double* out) const {
  std::size_t k = 0;
  for (std::size_t l = 0; l < W_.size(); ++l) {
    for (int r = 0; r < W_[l].rows(); ++r)
      for (int c = 0; c < W_[l].cols(); ++c) out[k++] = W_[l](r, c);
    for (int r = 0; r < b_[l].size(); ++r) out[k++] = b_[l][r];
  }
}

void FieldNetwork::set_params(const double* in) {
  std::size_t k = 0;
  for (std::size_t l = 0; l < W_.size(); ++l) {
    for (int r = 0; r < W_[l].rows(); ++r)
      for (int c = 0; c < W_[l].cols(); ++c) W_[l](r, c) = in[k++];
    for (int r = 0; r < b_[l].size(); ++r) b_[l][r] = in[k++];
  }
}

Eigen::MatrixXd FieldNetwork::forward(const std::vector<Vec3>& pts,
                                      Cache* cache) const {
  if (W_.empty()) throw NumericalError("network not initialized");
  const int n = static_cast<int>(pts.size());
  Eigen::MatrixXd x0(3, n);
  for (int i = 0; i < n; ++i) {
    if (!pts[i].allFinite())
      throw NumericalError("non-finite network input point");
    x0.col(i) = (pts[i] - center_) / half_extent_;
  }
  if (cache) {
    cache->x0 = x0;
    cache->pre.clear();
    cache->fallback.assign(n, 0);
  }

  Eigen::MatrixXd h = x0;
  for (int l = 0; l < cfg_.depth; ++l) {
    Eigen::MatrixXd pre = cfg_.omega0 * ((W_[l] * h).colwise() + b_[l]);
    if (cache) cache->pre.push_back(pre);
    h = pre.array().sin().matrix();
  }
  Eigen::MatrixXd raw = (W_[cfg_.depth] * h).colwise() + b_[cfg_.depth];
  if (cache) cache->raw = raw;

  if (cfg_.head == FieldHead::kQuaternion) {
    Eigen::MatrixXd out(4, n);
    for (int i = 0; i < n; ++i) {
      double norm = raw.col(i).norm();
      if (norm < kQuatNormGuard) {
        out.col(i) << 1, 0, 0, 0;
        if (cache) cache->fallback[i] = 1;
      } else {
        out.col(i) = raw.col(i) / norm;
      }
    }
    return out;
  }
  Eigen::MatrixXd out(3, n);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r)
      out(r, i) = std::clamp(std::exp(raw(r, i)), cfg_.scale_min, cfg_.scale_max);
  return out;
}

int FieldNetwork::backward(const Cache& cache, const Eigen::MatrixXd& dout,
                           double* grad) const {
  const int n = static_cast<int>(cache.x0.cols());
  Eigen::MatrixXd draw(out_dim(), n);
  int fallbacks = 0;

  if (cfg_.head == FieldHead::kQuaternion) {
    for (int i = 0; i < n; ++i) {
      if (cache.fallback[i]) {
        draw.col(i).setZero();
        ++fallbacks;
        continue;
      }
      double norm = cache.raw.col(i).norm();
      Eigen::Vector4d q = cache.raw.col(i) / norm;
      Eigen::Vector4d g = dout.col(i);
      draw.col(i) = (g - q * q.dot(g)) / norm;
    }
  } else {
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < 3; ++r) {
        double ex = std::exp(cache.raw(r, i));
        bool inside = ex > cfg_.scale_min && ex < cfg_.scale_max;
        draw(r, i) = inside ? dout(r, i) * ex : 0.0;
      }
  }

  // offsets of each layer inside the flat parameter vector
  std::vector<std::size_t> off(W_.size() + 1, 0);
  for (std::size_t l = 0; l < W_.size(); ++l)
    off[l + 1] = off[l] + static_cast<std::size_t>(W_[l].size()) + b_[l].size();

  auto add_layer_grad = [&](int l, const Eigen::MatrixXd& delta,
                            const Eigen::MatrixXd& input) {
    Eigen::MatrixXd dW = delta * input.transpose();
    Eigen::VectorXd db = delta.rowwise().sum();
    std::size_t k = off[l];
    for (int r = 0; r < dW.rows(); ++r)
      for (int c = 0; c < dW.cols(); ++c) grad[k++] += dW(r, c);
    for (int r = 0; r < db.size(); ++r) grad[k++] += db[r];
  };

  // head layer: raw = W h_last + b
  Eigen::MatrixXd h_last = cache.pre.back().array().sin().matrix();
  add_layer_grad(cfg_.depth, draw, h_last);
  Eigen::MatrixXd dh = W_[cfg_.depth].transpose() * draw;

  for (int l = cfg_.depth - 1; l >= 0; --l) {
    // h = sin(pre), pre = w0 (W input + b): dL/dpre = dh . cos(pre), and the
    // w0 factor lands on W, b and the input alike
    Eigen::MatrixXd dpre =
        (dh.array() * cache.pre[l].array().cos()).matrix() * cfg_.omega0;
    Eigen::MatrixXd input =
        l == 0 ? cache.x0 : cache.pre[l - 1].array().sin().matrix();
    add_layer_grad(l, dpre, input);
    if (l > 0) dh = W_[l].transpose() * dpre;
  }
  return fallbacks;
}

void FieldNetwork::serialize(std::ostream& out) const {
  uint8_t head = static_cast<uint8_t>(cfg_.head);
  int32_t depth = cfg_.depth, width = cfg_.width;
  write_raw(out, &head, 1);
  write_raw(out, &depth, 4);
  write_raw(out, &width, 4);
  write_raw(out, &cfg_.omega0, 8);
  write_raw(out, &cfg_.scale_min, 8);
  write_raw(out, &cfg_.scale_max, 8);
  write_raw(out, center_.data(), 24);
  write_raw(out, &half_extent_, 8);
  std::vector<double> params(num_params());
  get_params(params.data());
  write_raw(out, params.data(), params.size() * 8);
}

FieldNetwork FieldNetwork::deserialize(std::istream& in) {
  NetConfig cfg;
  uint8_t head;
  int32_t depth, width;
  read_raw(in, &head, 1);
  read_raw(in, &depth, 4);
  read_raw(in, &width, 4);
  read_raw(in, &cfg.omega0, 8);
  read_raw(in, &cfg.scale_min, 8);
  read_raw(in, &cfg.scale_max, 8);
  if (head > 1 || depth < 1 || depth > 64 || width < 1 || width > 8192)
    throw ConfigError("corrupt network header");
  cfg.head = static_cast<FieldHead>(head);
  cfg.depth = depth;
  cfg.width = width;
  FieldNetwork net = FieldNetwork::init(cfg, 0);
  read_raw(in, net.center_.data(), 24);
  read_raw(in, &net.half_extent_, 8);
  std::vector<double> params(net.num_params());
  read_raw(in, params.data(), params.size() * 8);
  net.set_params(params.data());
  return net;
}

}  // namespace curvlayer
