#pragma once

#include "dreamsampler/adam.hpp"
#include "dreamsampler/generators.hpp"
#include "dreamsampler/sampler.hpp"

#include <variant>
#include <vector>

namespace dreamsampler {

/// Disjoint {0,1} masks, each paired with a condition. Coordinates outside
/// every mask are treated as null-conditioned.
struct MaskedCondition {
  struct Region {
    Vec mask;
    Condition cond;
  };
  std::vector<Region> regions;

  /// Throws unless masks are {0,1}, share dimension d and do not overlap.
  void validate(Eigen::Index d) const;
};

/// gamma_t = C * alpha_bar_t
struct GuidanceSchedule {
  double c = 0.15;
  double gamma(double alpha_bar_t) const { return c * alpha_bar_t; }
};

/// Generator followed by an optional linear encoder into the diffusion latent.
struct LatentTarget {
  const Generator* generator = nullptr;
  const LinearAutoencoder* encoder = nullptr;

  Vec latent(const Vec& psi) const;
  /// (E . g)'(psi)^T v
  Vec pullback(const Vec& psi, const Vec& v) const;
};

/// Score-distillation gradient (eps_hat - eps_tilde) pulled back through the
/// generator and encoder; eps_hat is treated as a constant.
Vec sds_gradient(const LatentTarget& target, const Vec& psi, const EpsilonModel& m, Condition c,
                 int t, const Vec& eps_tilde, double omega, const NoiseSchedule& s);

enum class OptimizerKind { Adam, Sgd };

struct DistillConfig {
  int iterations = 200;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// SGD only: use zeta_t = sqrt((1 - ab_t) / ab_t), which turns a step on the
  /// identity generator into the exact proximal solve.
  bool exact_step = false;
  double omega = 1.0;
  double eta = 1.0;
  SigmaMode sigma_mode = SigmaMode::Ddim;
  double divergence_norm = 1e6;
};

struct DistillResult {
  Vec psi;
  std::vector<Vec> z_trace;  // noisy latents z_t per iteration (when requested)
  std::vector<int> t_trace;
};

/// Vanilla score distillation: uniform random t and fresh noise every iteration.
DistillResult score_distillation_loop(const LatentTarget& target, const Vec& psi0,
                                      const EpsilonModel& m, Condition c, const NoiseSchedule& s,
                                      const DistillConfig& cfg, Rng& rng, bool trace = false);

/// Distillation along the reverse timestep plan (one step per iteration). The
/// injected noise is built from the previous iteration's estimate; `regs` act
/// on the generator output g(psi).
DistillResult dreamsampler_distill_loop(const LatentTarget& target, const Vec& psi0,
                                        const EpsilonModel& m, Condition c,
                                        const std::vector<WeightedRegularizer>& regs,
                                        const NoiseSchedule& s, const DistillConfig& cfg, Rng& rng,
                                        bool trace = false);

/// (1 - gamma) * zhat(c_null) + gamma * zhat(c_tgt)
Vec dds_closed_form(const Vec& z_t, int t, const EpsilonModel& m, Condition c_tgt, double gamma,
                    const NoiseSchedule& s);
/// Tweedie with the CFG estimate at scale gamma; equal to dds_closed_form.
Vec dds_cfg_tweedie(const Vec& z_t, int t, const EpsilonModel& m, Condition c_tgt, double gamma,
                    const NoiseSchedule& s);

/// Tweedie with per-region CFG noise estimates at scale gamma; the uncovered
/// complement uses the null estimate.
Vec localized_tweedie(const Vec& z_t, int t, const EpsilonModel& m, const MaskedCondition& mc,
                      double gamma, const NoiseSchedule& s);

enum class RenoiseSource {
  Current,   // eps_null at the current z_t
  Previous,  // eps_null carried from the previous step
};
enum class EpsSeed { Inversion, Random };

struct EditConfig {
  int nfe = 200;
  GuidanceSchedule guidance;
  RenoiseSource renoise = RenoiseSource::Current;
  EpsSeed eps_seed = EpsSeed::Inversion;  // only used with RenoiseSource::Previous
};

using EditTarget = std::variant<Condition, MaskedCondition>;

/// Null-text inversion followed by guided deterministic reverse sampling.
Vec edit(const Vec& z_0, const EpsilonModel& m, const EditTarget& target, const NoiseSchedule& s,
         const EditConfig& cfg, Rng& rng, std::vector<Vec>* trace = nullptr);

}  // namespace dreamsampler
