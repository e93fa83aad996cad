#include "dreamsampler/distill.hpp"

#include <cmath>
#include <sstream>

namespace dreamsampler {

void MaskedCondition::validate(Eigen::Index d) const {
  Vec cover = Vec::Zero(d);
  for (const auto& r : regions) {
    require(r.mask.size() == d, "MaskedCondition: mask dimension mismatch");
    require(((r.mask.array() == 0.0) || (r.mask.array() == 1.0)).all(),
            "MaskedCondition: mask entries must be 0 or 1");
    cover += r.mask;
  }
  require(d == 0 || cover.maxCoeff() <= 1.0, "MaskedCondition: masks overlap");
}

Vec LatentTarget::latent(const Vec& psi) const {
  require(generator != nullptr, "LatentTarget: missing generator");
  const Vec x = generator->render(psi);
  return encoder ? encoder->encode(x) : x;
}

Vec LatentTarget::pullback(const Vec& psi, const Vec& v) const {
  const Vec vx = encoder ? encoder->encode_matrix().transpose() * v : v;
  return generator->adjoint_jacobian_apply(psi, vx);
}

Vec sds_gradient(const LatentTarget& target, const Vec& psi, const EpsilonModel& m, Condition c,
                 int t, const Vec& eps_tilde, double omega, const NoiseSchedule& s) {
  const Vec z = target.latent(psi);
  const Vec z_t = forward_noise(z, s.alpha_bar(t), eps_tilde);
  const Vec eps_hat = cfg_epsilon(m, z_t, t, c, omega);
  const Vec residual = eps_hat - eps_tilde;
  require(residual.allFinite(), "sds_gradient: non-finite residual");
  return target.pullback(psi, residual);
}

namespace {

class ParamUpdater {
 public:
  ParamUpdater(const DistillConfig& cfg, Eigen::Index n, const NoiseSchedule& s)
      : cfg_(cfg), s_(s), adam_(n, cfg.learning_rate, cfg.beta1, cfg.beta2) {
    require(cfg.learning_rate > 0.0 || cfg.exact_step, "distill: learning rate must be positive");
  }

  void apply(Vec& psi, const Vec& grad, int t) {
    if (cfg_.optimizer == OptimizerKind::Adam) {
      adam_step(adam_, psi, grad);
    } else {
      const double ab = s_.alpha_bar(t);
      const double zeta = cfg_.exact_step ? std::sqrt((1.0 - ab) / ab) : cfg_.learning_rate;
      psi -= zeta * grad;
    }
  }

 private:
  const DistillConfig& cfg_;
  const NoiseSchedule& s_;
  AdamState adam_;
};

void check_divergence(const Vec& psi, const DistillConfig& cfg, int iteration, int t) {
  if (!psi.allFinite() || psi.norm() > cfg.divergence_norm) {
    std::ostringstream os;
    os << "distillation diverged at iteration " << iteration << " (t = " << t
       << "): |psi| = " << psi.norm() << " exceeds " << cfg.divergence_norm;
    throw ConvergenceError(os.str());
  }
}

}  // namespace

DistillResult score_distillation_loop(const LatentTarget& target, const Vec& psi0,
                                      const EpsilonModel& m, Condition c, const NoiseSchedule& s,
                                      const DistillConfig& cfg, Rng& rng, bool trace) {
  require(cfg.iterations >= 0, "score_distillation_loop: negative iteration budget");
  DistillResult out{psi0, {}, {}};
  ParamUpdater upd(cfg, psi0.size(), s);
  for (int it = 0; it < cfg.iterations; ++it) {
    const int t = rng.uniform_int(1, s.T());
    const Vec eps_tilde = rng.normal_vec(m.dim());
    if (trace) {
      out.z_trace.push_back(forward_noise(target.latent(out.psi), s.alpha_bar(t), eps_tilde));
      out.t_trace.push_back(t);
    }
    const Vec grad = sds_gradient(target, out.psi, m, c, t, eps_tilde, cfg.omega, s);
    upd.apply(out.psi, grad, t);
    check_divergence(out.psi, cfg, it, t);
  }
  return out;
}

DistillResult dreamsampler_distill_loop(const LatentTarget& target, const Vec& psi0,
                                        const EpsilonModel& m, Condition c,
                                        const std::vector<WeightedRegularizer>& regs,
                                        const NoiseSchedule& s, const DistillConfig& cfg, Rng& rng,
                                        bool trace) {
  require(cfg.iterations >= 0 && cfg.iterations <= s.T(),
          "dreamsampler_distill_loop: iterations must lie in [0, T]");
  DistillResult out{psi0, {}, {}};
  if (cfg.iterations == 0) return out;
  for (const auto& r : regs) {
    require(r.reg != nullptr && r.weight >= 0.0 && std::isfinite(r.weight),
            "dreamsampler_distill_loop: invalid regularizer weight");
  }
  const TimestepPlan plan = plan_timesteps(s, cfg.iterations, Direction::Reverse);
  ParamUpdater upd(cfg, psi0.size(), s);
  Vec eps_carry = rng.normal_vec(m.dim());  // stands in for the estimate at T + 1
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int t = plan.steps[i];
    const double ab = s.alpha_bar(t);
    const Vec eps = rng.normal_vec(m.dim());
    Vec eps_tilde = eps_carry;
    if (i > 0) {
      const double sigma = ddim_sigma(s, plan.steps[i - 1], t, cfg.eta, cfg.sigma_mode);
      eps_tilde = ddim_noise(eps_carry, eps, sigma, ab);
    }
    const Vec z_t = forward_noise(target.latent(out.psi), ab, eps_tilde);
    if (trace) {
      out.z_trace.push_back(z_t);
      out.t_trace.push_back(t);
    }
    const Vec eps_hat = cfg_epsilon(m, z_t, t, c, cfg.omega);
    const Vec residual = eps_hat - eps_tilde;
    require(residual.allFinite(), "dreamsampler_distill_loop: non-finite residual");
    Vec grad = target.pullback(out.psi, residual);
    if (!regs.empty()) {
      const Vec x = target.generator->render(out.psi);
      Vec gx = Vec::Zero(x.size());
      for (const auto& r : regs) gx += r.weight * r.reg->gradient(x);
      grad += target.generator->adjoint_jacobian_apply(out.psi, gx);
    }
    upd.apply(out.psi, grad, t);
    check_divergence(out.psi, cfg, static_cast<int>(i), t);
    eps_carry = eps_hat;
  }
  return out;
}

// Both guided forms are evaluated in extended precision: at large t the
// subtraction z - sqrt(1 - ab) eps cancels and is then amplified by 1/sqrt(ab).
Vec dds_closed_form(const Vec& z_t, int t, const EpsilonModel& m, Condition c_tgt, double gamma,
                    const NoiseSchedule& s) {
  require(gamma >= 0.0 && gamma <= 1.0, "dds_closed_form: gamma must lie in [0, 1]");
  const long double ab = s.alpha_bar(t);
  const long double r = std::sqrt(ab), q = std::sqrt(1.0L - ab), g = gamma;
  const Vec e0 = m.predict(z_t, t, Condition::null());
  const Vec e1 = m.predict(z_t, t, c_tgt);
  Vec out(z_t.size());
  for (Eigen::Index j = 0; j < z_t.size(); ++j) {
    const long double z_null = (z_t[j] - q * e0[j]) / r;
    const long double z_tgt = (z_t[j] - q * e1[j]) / r;
    out[j] = static_cast<double>((1.0L - g) * z_null + g * z_tgt);
  }
  return out;
}

Vec dds_cfg_tweedie(const Vec& z_t, int t, const EpsilonModel& m, Condition c_tgt, double gamma,
                    const NoiseSchedule& s) {
  require(gamma >= 0.0 && gamma <= 1.0, "dds_cfg_tweedie: gamma must lie in [0, 1]");
  const long double ab = s.alpha_bar(t);
  const long double r = std::sqrt(ab), q = std::sqrt(1.0L - ab), g = gamma;
  const Vec e0 = m.predict(z_t, t, Condition::null());
  const Vec e1 = m.predict(z_t, t, c_tgt);
  Vec out(z_t.size());
  for (Eigen::Index j = 0; j < z_t.size(); ++j) {
    const long double eps = e0[j] + g * (e1[j] - e0[j]);
    out[j] = static_cast<double>((z_t[j] - q * eps) / r);
  }
  return out;
}

namespace {

Vec localized_from_null(const Vec& z_t, int t, const EpsilonModel& m, const MaskedCondition& mc,
                        double gamma, const NoiseSchedule& s, const Vec& eps_null) {
  mc.validate(z_t.size());
  Vec eps = eps_null;
  for (const auto& r : mc.regions) {
    if (r.cond.is_null() || r.mask.sum() == 0.0) continue;
    const Vec eps_c = m.predict(z_t, t, r.cond);
    const Vec guided = eps_null + gamma * (eps_c - eps_null);
    eps = r.mask.select(guided, eps);
  }
  return tweedie(z_t, s.alpha_bar(t), eps);
}

}  // namespace

Vec localized_tweedie(const Vec& z_t, int t, const EpsilonModel& m, const MaskedCondition& mc,
                      double gamma, const NoiseSchedule& s) {
  return localized_from_null(z_t, t, m, mc, gamma, s, m.predict(z_t, t, Condition::null()));
}

Vec edit(const Vec& z_0, const EpsilonModel& m, const EditTarget& target, const NoiseSchedule& s,
         const EditConfig& cfg, Rng& rng, std::vector<Vec>* trace) {
  require(cfg.guidance.c >= 0.0 && cfg.guidance.c <= 1.0, "edit: guidance constant must lie in [0, 1]");
  if (const auto* mc = std::get_if<MaskedCondition>(&target)) mc->validate(z_0.size());
  const TimestepPlan fwd = plan_timesteps(s, cfg.nfe, Direction::Forward);
  const TimestepPlan rev = plan_timesteps(s, cfg.nfe, Direction::Reverse);
  const LatentState inverted = ddim_invert(z_0, m, Condition::null(), fwd, s);

  Vec z = inverted.z;
  Vec eps_carry = cfg.eps_seed == EpsSeed::Inversion ? *inverted.eps_prev : rng.normal_vec(z.size());
  for (std::size_t i = 0; i < rev.size(); ++i) {
    const int t = rev.steps[i];
    const int t_prev = rev.prev(i);
    const double ab = s.alpha_bar(t);
    const double ab_prev = s.alpha_bar(t_prev);
    const double gamma = cfg.guidance.gamma(ab);
    const Vec eps_null = m.predict(z, t, Condition::null());
    Vec z_bar;
    if (const auto* c = std::get_if<Condition>(&target)) {
      Vec eps_hat = eps_null;
      if (!c->is_null()) eps_hat += gamma * (m.predict(z, t, *c) - eps_null);
      z_bar = tweedie(z, ab, eps_hat);
    } else {
      z_bar = localized_from_null(z, t, m, std::get<MaskedCondition>(target), gamma, s, eps_null);
    }
    const Vec& eps_r = cfg.renoise == RenoiseSource::Current ? eps_null : eps_carry;
    z = std::sqrt(ab_prev) * z_bar + std::sqrt(1.0 - ab_prev) * eps_r;
    eps_carry = eps_null;
    if (trace) trace->push_back(z);
  }
  return z;
}

}  // namespace dreamsampler
