#pragma once

#include "dreamsampler/types.hpp"

namespace dreamsampler {

struct AdamState {
  Vec m;  // first moment
  Vec v;  // second moment
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double learning_rate = 1e-3;

  AdamState() = default;
  AdamState(Eigen::Index n, double lr, double b1 = 0.9, double b2 = 0.999, double e = 1e-8)
      : m(Vec::Zero(n)), v(Vec::Zero(n)), beta1(b1), beta2(b2), eps(e), learning_rate(lr) {}
};

/// One bias-corrected Adam update, in place. `lr_scale` multiplies the
/// learning rate per coordinate (empty means 1 everywhere).
void adam_step(AdamState& state, Vec& psi, const Vec& grad, const Vec& lr_scale = Vec());

}  // namespace dreamsampler
