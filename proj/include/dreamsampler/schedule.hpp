#pragma once

#include "dreamsampler/types.hpp"

#include <vector>

namespace dreamsampler {

/// Discrete-time noise schedule with T train steps. Timesteps are 1-based;
/// alpha_bar(0) is defined as 1 (clean data).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> betas);

  int T() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const;
  double alpha_bar(int t) const;
  const std::vector<double>& betas() const { return beta_; }

 private:
  std::vector<double> beta_;       // beta_[t-1] for t in [1, T]
  std::vector<double> alpha_bar_;  // alpha_bar_[t] for t in [0, T]
};

/// Linear beta schedule from beta_start to beta_end over T steps.
NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

enum class SigmaMode {
  Ddim,      // eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev)
  Explicit,  // sqrt(ab_t) * sqrt(1-ab_prev), the inpainting setting
};

/// Stochastic magnitude of the renoising term for the step t -> t_prev.
/// Throws if the squared magnitude exceeds 1 - alpha_bar(t_prev).
double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta,
                  SigmaMode mode = SigmaMode::Ddim);

enum class Direction { Forward, Reverse };

struct TimestepPlan {
  std::vector<int> steps;
  Direction direction = Direction::Reverse;

  std::size_t size() const { return steps.size(); }
  /// Timestep reached after executing step i: the next entry, or 0 (reverse)
  /// past the end. For forward plans this is the step's source timestep.
  int prev(std::size_t i) const;
};

TimestepPlan plan_timesteps(const NoiseSchedule& s, int nfe, Direction direction);

}  // namespace dreamsampler
