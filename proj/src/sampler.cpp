#include "dreamsampler/sampler.hpp"

#include <cmath>
#include <sstream>

namespace dreamsampler {

std::optional<Vec> QuadraticAnchor::prox(const Vec& center, double weight) const {
  if (std::isinf(weight)) return anchor_;
  return ((center + weight * anchor_) / (1.0 + weight)).eval();
}

MaskedQuadraticAnchor::MaskedQuadraticAnchor(Vec mask, Vec anchor)
    : mask_(std::move(mask)), anchor_(std::move(anchor)) {
  require(mask_.size() == anchor_.size(), "MaskedQuadraticAnchor: size mismatch");
  require(((mask_.array() == 0.0) || (mask_.array() == 1.0)).all(),
          "MaskedQuadraticAnchor: mask entries must be 0 or 1");
}

Vec tweedie(const Vec& z_t, double alpha_bar_t, const Vec& eps) {
  require(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0, "tweedie: alpha_bar must lie in (0, 1]");
  require(z_t.size() == eps.size(), "tweedie: dimension mismatch");
  return (z_t - std::sqrt(1.0 - alpha_bar_t) * eps) / std::sqrt(alpha_bar_t);
}

Vec forward_noise(const Vec& z_0, double alpha_bar_t, const Vec& eps) {
  require(z_0.size() == eps.size(), "forward_noise: dimension mismatch");
  return std::sqrt(alpha_bar_t) * z_0 + std::sqrt(1.0 - alpha_bar_t) * eps;
}

namespace {

void check_sigma(double sigma, double alpha_bar_prev) {
  require(sigma >= 0.0, "ddim_noise: sigma must be nonnegative");
  if (sigma * sigma > (1.0 - alpha_bar_prev) * (1.0 + 1e-12) + 1e-300) {
    std::ostringstream os;
    os << "ddim_noise: sigma^2 = " << sigma * sigma << " exceeds 1 - alpha_bar_prev = "
       << 1.0 - alpha_bar_prev;
    throw ValidationError(os.str());
  }
}

double det_coeff(double sigma, double alpha_bar_prev) {
  return std::sqrt(std::max(0.0, 1.0 - alpha_bar_prev - sigma * sigma));
}

}  // namespace

Vec ddim_noise(const Vec& eps_pred, const Vec& eps_rand, double sigma, double alpha_bar_prev) {
  require(eps_pred.size() == eps_rand.size(), "ddim_noise: dimension mismatch");
  check_sigma(sigma, alpha_bar_prev);
  const double total = std::sqrt(1.0 - alpha_bar_prev);
  if (total == 0.0) return eps_pred;
  return (det_coeff(sigma, alpha_bar_prev) * eps_pred + sigma * eps_rand) / total;
}

Vec renoise(const Vec& z_bar, const Vec& eps_pred, const Vec& eps_rand, double sigma,
            double alpha_bar_prev) {
  require(z_bar.size() == eps_pred.size() && eps_pred.size() == eps_rand.size(),
          "renoise: dimension mismatch");
  check_sigma(sigma, alpha_bar_prev);
  return std::sqrt(alpha_bar_prev) * z_bar + det_coeff(sigma, alpha_bar_prev) * eps_pred +
         sigma * eps_rand;
}

Vec solve_latent_opt(const Vec& z0_hat, const std::vector<WeightedRegularizer>& regs,
                     const SamplerConfig& cfg) {
  std::vector<WeightedRegularizer> active;
  for (const auto& r : regs) {
    require(r.reg != nullptr, "solve_latent_opt: null regularizer");
    require(r.weight >= 0.0, "solve_latent_opt: weights must be nonnegative");
    if (r.weight > 0.0) active.push_back(r);
  }
  if (active.empty()) return z0_hat;

  bool all_quadratic = true;
  for (const auto& r : active) all_quadratic &= r.reg->diagonal_quadratic().has_value();
  if (all_quadratic) {
    const Eigen::Index d = z0_hat.size();
    Vec num = z0_hat, den = Vec::Ones(d);
    Vec inf_num = Vec::Zero(d), inf_den = Vec::Zero(d);
    for (const auto& r : active) {
      auto [m, a] = *r.reg->diagonal_quadratic();
      require(m.size() == d && a.size() == d, "solve_latent_opt: regularizer dimension mismatch");
      if (std::isinf(r.weight)) {
        inf_num += m.cwiseProduct(a);
        inf_den += m;
      } else {
        num += r.weight * m.cwiseProduct(a);
        den += r.weight * m;
      }
    }
    Vec out(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      out[j] = inf_den[j] > 0.0 ? inf_num[j] / inf_den[j] : num[j] / den[j];
    }
    return out;
  }

  if (active.size() == 1) {
    if (auto p = active.front().reg->prox(z0_hat, active.front().weight)) return *p;
  }

  for (const auto& r : active) {
    require(std::isfinite(r.weight), "solve_latent_opt: infinite weight needs a closed-form regularizer");
  }
  Vec z = z0_hat;
  for (int it = 0; it < cfg.opt_max_iter; ++it) {
    Vec g = 2.0 * (z - z0_hat);
    for (const auto& r : active) g += r.weight * r.reg->gradient(z);
    if (g.norm() < cfg.opt_tol) return z;
    z -= cfg.opt_step * g;
    if (!z.allFinite()) break;
  }
  Vec g = 2.0 * (z - z0_hat);
  for (const auto& r : active) g += r.weight * r.reg->gradient(z);
  if (g.allFinite() && g.norm() < cfg.opt_tol) return z;
  std::ostringstream os;
  os << "solve_latent_opt: gradient norm " << g.norm() << " above tolerance " << cfg.opt_tol
     << " after " << cfg.opt_max_iter << " iterations";
  throw ConvergenceError(os.str());
}

namespace {

LatentState regularized_step(const LatentState& state, int t_prev, const EpsilonModel& m,
                             Condition c, const std::vector<WeightedRegularizer>* regs,
                             const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng) {
  require(state.t > 0, "step: state.t must be positive");
  require(state.z.size() == m.dim(), "step: latent dimension does not match model");
  const Vec eps_hat = cfg_epsilon(m, state.z, state.t, c, cfg.omega);
  const double ab_t = s.alpha_bar(state.t);
  const double ab_prev = s.alpha_bar(t_prev);
  Vec z_bar = tweedie(state.z, ab_t, eps_hat);
  if (regs) z_bar = solve_latent_opt(z_bar, *regs, cfg);
  const double sigma = ddim_sigma(s, state.t, t_prev, cfg.eta, cfg.sigma_mode);
  const Vec eps = rng.normal_vec(state.z.size());
  return {renoise(z_bar, eps_hat, eps, sigma, ab_prev), t_prev, eps_hat};
}

}  // namespace

LatentState ddim_step(const LatentState& state, int t_prev, const EpsilonModel& m, Condition c,
                      const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng) {
  return regularized_step(state, t_prev, m, c, nullptr, s, cfg, rng);
}

LatentState dreamsampler_step(const LatentState& state, int t_prev, const EpsilonModel& m,
                              Condition c, const std::vector<WeightedRegularizer>& regs,
                              const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng) {
  return regularized_step(state, t_prev, m, c, &regs, s, cfg, rng);
}

LatentState ddim_invert(const Vec& z_0, const EpsilonModel& m, Condition c,
                        const TimestepPlan& plan, const NoiseSchedule& s, double omega) {
  require(plan.direction == Direction::Forward, "ddim_invert: plan must be forward");
  require(!plan.steps.empty(), "ddim_invert: empty plan");
  require(z_0.size() == m.dim(), "ddim_invert: latent dimension does not match model");
  LatentState st{z_0, 0, std::nullopt};
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int t_to = plan.steps[i];
    const Vec eps_hat = cfg_epsilon(m, st.z, t_to, c, omega);
    const Vec z_bar = tweedie(st.z, s.alpha_bar(st.t), eps_hat);
    st.z = forward_noise(z_bar, s.alpha_bar(t_to), eps_hat);
    st.t = t_to;
    st.eps_prev = eps_hat;
  }
  return st;
}

LatentState sample_reverse(const LatentState& start, const EpsilonModel& m, Condition c,
                           const TimestepPlan& plan, const NoiseSchedule& s,
                           const SamplerConfig& cfg, Rng& rng, std::vector<Vec>* trace) {
  require(plan.direction == Direction::Reverse, "sample_reverse: plan must be reverse");
  require(!plan.steps.empty() && start.t == plan.steps.front(),
          "sample_reverse: start.t must equal the first plan step");
  LatentState st = start;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    st = ddim_step(st, plan.prev(i), m, c, s, cfg, rng);
    if (trace) trace->push_back(st.z);
  }
  return st;
}

}  // namespace dreamsampler
