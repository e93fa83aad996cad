#include "dreamsampler/adam.hpp"

#include <cmath>

namespace dreamsampler {

void adam_step(AdamState& state, Vec& psi, const Vec& grad, const Vec& lr_scale) {
  require(psi.size() == grad.size(), "adam_step: parameter/gradient size mismatch");
  require(state.m.size() == psi.size() && state.v.size() == psi.size(),
          "adam_step: moment accumulators do not match parameter size");
  require(lr_scale.size() == 0 || lr_scale.size() == psi.size(),
          "adam_step: learning-rate scale size mismatch");
  require(grad.allFinite(), "adam_step: non-finite gradient");

  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    const double lr = state.learning_rate * (lr_scale.size() ? lr_scale[i] : 1.0);
    psi[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace dreamsampler
