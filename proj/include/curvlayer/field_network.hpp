#pragma once
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "curvlayer/geometry.hpp"

namespace curvlayer {

enum class FieldHead : uint8_t { kQuaternion = 0, kScale = 1 };

struct NetConfig {
  FieldHead head = FieldHead::kQuaternion;
  int depth = 5;        // number of sine layers
  int width = 64;
  double omega0 = 30.0;
  double scale_min = 0.2;   // scale head clamp bounds
  double scale_max = 5.0;
};

// Sinusoidal MLP x -> sin(w0(Wx+b)) -> ... -> linear head. Inputs pass
// through an isotropic affine map into the unit cube first. The final layer
// starts at zero weights with an identity bias, so a fresh network emits the
// identity rotation (head quaternion) or unit scales everywhere.
class FieldNetwork {
 public:
  FieldNetwork() = default;
  static FieldNetwork init(const NetConfig& cfg, uint64_t seed);

  void set_input_frame(const Vec3& center, double half_extent);
  const Vec3& input_center() const { return center_; }
  double input_half_extent() const { return half_extent_; }
  const NetConfig& config() const { return cfg_; }
  int out_dim() const { return cfg_.head == FieldHead::kQuaternion ? 4 : 3; }

  std::size_t num_params() const;
  void get_params(double* out) const;
  void set_params(const double* in);

  struct Cache {
    Eigen::MatrixXd x0;                // normalized inputs, 3 x n
    std::vector<Eigen::MatrixXd> pre;  // pre-activations per sine layer
    Eigen::MatrixXd raw;               // head input, out x n
    std::vector<uint8_t> fallback;     // quaternion lanes below the norm guard
  };

  // Head-activated outputs, out_dim x n. Quaternion columns are unit (or the
  // identity fallback when |raw| < 1e-8); scale lanes are clamp(exp(raw)).
  Eigen::MatrixXd forward(const std::vector<Vec3>& pts,
                          Cache* cache = nullptr) const;

  // Accumulates dL/dparams into grad (layout matches get_params) given
  // dL/doutput; clamped scale lanes and fallback quaternion columns get zero
  // gradient. Returns the number of fallback columns seen.
  int backward(const Cache& cache, const Eigen::MatrixXd& dout,
               double* grad) const;

  void serialize(std::ostream& out) const;
  static FieldNetwork deserialize(std::istream& in);

 private:
  NetConfig cfg_;
  std::vector<Eigen::MatrixXd> W_;  // depth sine layers + head
  std::vector<Eigen::VectorXd> b_;
  Vec3 center_{0, 0, 0};
  double half_extent_ = 1.0;
};

}  // namespace curvlayer
