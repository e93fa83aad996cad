#include "dreamsampler/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dreamsampler {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  require(!beta_.empty(), "schedule: T must be >= 1");
  alpha_bar_.resize(beta_.size() + 1);
  alpha_bar_[0] = 1.0;
  for (std::size_t i = 0; i < beta_.size(); ++i) {
    const double b = beta_[i];
    require(b > 0.0 && b < 1.0, "schedule: beta values must lie in (0, 1)");
    alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - b);
  }
}

double NoiseSchedule::beta(int t) const {
  require(t >= 1 && t <= T(), "schedule: timestep out of range");
  return beta_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  require(t >= 0 && t <= T(), "schedule: timestep out of range");
  return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  require(T >= 1, "make_schedule: T must be >= 1");
  require(beta_start > 0.0 && beta_end < 1.0,
          "make_schedule: beta bounds must satisfy 0 < beta_start, beta_end < 1");
  require(beta_start <= beta_end, "make_schedule: beta_start must not exceed beta_end");
  require(T > 1 || beta_start == beta_end,
          "make_schedule: a single-step schedule needs beta_start == beta_end");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas));
}

double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta, SigmaMode mode) {
  require(t_prev < t, "ddim_sigma: t_prev must be smaller than t");
  require(eta >= 0.0, "ddim_sigma: eta must be nonnegative");
  const double ab_t = s.alpha_bar(t);
  const double ab_p = s.alpha_bar(t_prev);
  double sigma = 0.0;
  switch (mode) {
    case SigmaMode::Ddim:
      sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
      break;
    case SigmaMode::Explicit:
      sigma = std::sqrt(ab_t) * std::sqrt(1.0 - ab_p);
      break;
  }
  // Relative slack absorbs rounding when sigma saturates the bound (eta = 1 at t_prev = 0).
  if (sigma * sigma > (1.0 - ab_p) * (1.0 + 1e-12) + 1e-300) {
    std::ostringstream os;
    os << "ddim_sigma: sigma^2 = " << sigma * sigma << " exceeds 1 - alpha_bar(t_prev) = "
       << 1.0 - ab_p;
    throw ValidationError(os.str());
  }
  return sigma;
}

int TimestepPlan::prev(std::size_t i) const {
  if (direction == Direction::Reverse) return i + 1 < steps.size() ? steps[i + 1] : 0;
  return i == 0 ? 0 : steps[i - 1];
}

TimestepPlan plan_timesteps(const NoiseSchedule& s, int nfe, Direction direction) {
  const int T = s.T();
  require(nfe >= 1 && nfe <= T, "plan_timesteps: nfe must lie in [1, T]");
  TimestepPlan plan;
  plan.direction = direction;
  plan.steps.reserve(static_cast<std::size_t>(nfe));
  for (long k = 1; k <= nfe; ++k) {
    plan.steps.push_back(static_cast<int>(k * T / nfe));
  }
  if (direction == Direction::Reverse) std::reverse(plan.steps.begin(), plan.steps.end());
  return plan;
}

}  // namespace dreamsampler
