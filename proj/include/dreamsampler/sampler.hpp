#pragma once

#include "dreamsampler/schedule.hpp"
#include "dreamsampler/score_oracle.hpp"
#include "dreamsampler/types.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace dreamsampler {

struct LatentState {
  Vec z;
  int t = 0;
  std::optional<Vec> eps_prev;  // noise estimate carried from the previous step
};

struct SamplerConfig {
  double eta = 0.0;
  SigmaMode sigma_mode = SigmaMode::Ddim;
  double omega = 1.0;  // CFG scale
  int nfe = 200;
  double guidance_c = 0.15;  // gamma_t = C * alpha_bar_t for editing
  // Gradient-descent fallback of solve_latent_opt.
  double opt_step = 0.1;
  int opt_max_iter = 500;
  double opt_tol = 1e-8;
};

/// R(z) for the regularized proximal problem  min ||z - z0_hat||^2 + sum w_i R_i(z).
class Regularizer {
 public:
  virtual ~Regularizer() = default;
  virtual double value(const Vec& z) const = 0;
  virtual Vec gradient(const Vec& z) const = 0;
  /// argmin_z ||z - center||^2 + weight * R(z), when available in closed form.
  virtual std::optional<Vec> prox(const Vec& center, double weight) const {
    (void)center;
    (void)weight;
    return std::nullopt;
  }
  /// For separable quadratics R(z) = sum_j m_j (z_j - a_j)^2, the pair (m, a).
  virtual std::optional<std::pair<Vec, Vec>> diagonal_quadratic() const { return std::nullopt; }
};

/// ||z - a||^2
class QuadraticAnchor final : public Regularizer {
 public:
  explicit QuadraticAnchor(Vec anchor) : anchor_(std::move(anchor)) {}
  double value(const Vec& z) const override { return (z - anchor_).squaredNorm(); }
  Vec gradient(const Vec& z) const override { return 2.0 * (z - anchor_); }
  std::optional<Vec> prox(const Vec& center, double weight) const override;
  std::optional<std::pair<Vec, Vec>> diagonal_quadratic() const override {
    return std::make_pair(Vec::Ones(anchor_.size()).eval(), anchor_);
  }

 private:
  Vec anchor_;
};

/// ||M .* (z - a)||^2 for a {0,1} mask M.
class MaskedQuadraticAnchor final : public Regularizer {
 public:
  MaskedQuadraticAnchor(Vec mask, Vec anchor);
  double value(const Vec& z) const override {
    return (mask_.cwiseProduct(z - anchor_)).squaredNorm();
  }
  Vec gradient(const Vec& z) const override { return 2.0 * mask_.cwiseProduct(z - anchor_); }
  std::optional<std::pair<Vec, Vec>> diagonal_quadratic() const override {
    return std::make_pair(mask_, anchor_);
  }

 private:
  Vec mask_, anchor_;
};

/// v . z
class LinearRegularizer final : public Regularizer {
 public:
  explicit LinearRegularizer(Vec v) : v_(std::move(v)) {}
  double value(const Vec& z) const override { return v_.dot(z); }
  Vec gradient(const Vec&) const override { return v_; }
  std::optional<Vec> prox(const Vec& center, double weight) const override {
    return (center - 0.5 * weight * v_).eval();
  }

 private:
  Vec v_;
};

struct WeightedRegularizer {
  double weight;
  const Regularizer* reg;
};

/// Tweedie posterior mean (z_t - sqrt(1 - ab) eps) / sqrt(ab).
Vec tweedie(const Vec& z_t, double alpha_bar_t, const Vec& eps);

/// Forward process sqrt(ab) z_0 + sqrt(1 - ab) eps.
Vec forward_noise(const Vec& z_0, double alpha_bar_t, const Vec& eps);

/// Renoising direction (sqrt(1 - ab_prev - sigma^2) eps_pred + sigma eps_rand) / sqrt(1 - ab_prev).
/// At ab_prev = 1 (only sigma = 0 is admissible) the limit eps_pred is returned.
Vec ddim_noise(const Vec& eps_pred, const Vec& eps_rand, double sigma, double alpha_bar_prev);

/// sqrt(ab_prev) z_bar + sqrt(1 - ab_prev) ddim_noise(...), written without the
/// division so that the final step onto ab_prev = 1 is exact.
Vec renoise(const Vec& z_bar, const Vec& eps_pred, const Vec& eps_rand, double sigma,
            double alpha_bar_prev);

/// argmin_z ||z - z0_hat||^2 + sum_i w_i R_i(z). Uses a closed form for
/// separable quadratics (infinite weights pin their anchors), a regularizer's
/// own prox when it is the only term, and gradient descent otherwise.
Vec solve_latent_opt(const Vec& z0_hat, const std::vector<WeightedRegularizer>& regs,
                     const SamplerConfig& cfg = {});

/// One DDIM step from state.t to t_prev with the CFG noise estimate; always
/// draws one Gaussian vector from rng.
LatentState ddim_step(const LatentState& state, int t_prev, const EpsilonModel& m, Condition c,
                      const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng);

/// Regularized step: the Tweedie estimate is replaced by the solution of the
/// proximal problem before renoising. With no regularizers it equals ddim_step.
LatentState dreamsampler_step(const LatentState& state, int t_prev, const EpsilonModel& m,
                              Condition c, const std::vector<WeightedRegularizer>& regs,
                              const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng);

/// Deterministic DDIM inversion along a forward plan. Each step from t_from to
/// t_to evaluates the model at the current iterate and time t_to.
LatentState ddim_invert(const Vec& z_0, const EpsilonModel& m, Condition c,
                        const TimestepPlan& plan, const NoiseSchedule& s, double omega = 1.0);

/// Runs ddim_step along a reverse plan starting from `start` (whose t must equal plan.steps[0]).
LatentState sample_reverse(const LatentState& start, const EpsilonModel& m, Condition c,
                           const TimestepPlan& plan, const NoiseSchedule& s,
                           const SamplerConfig& cfg, Rng& rng,
                           std::vector<Vec>* trace = nullptr);

}  // namespace dreamsampler
