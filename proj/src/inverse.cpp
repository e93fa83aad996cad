#include "dreamsampler/inverse.hpp"

#include <cmath>
#include <sstream>

namespace dreamsampler {

// --- operators --------------------------------------------------------------

MaskOperator::MaskOperator(Vec mask) : mask_(std::move(mask)) {
  require(((mask_.array() == 0.0) || (mask_.array() == 1.0)).all(),
          "MaskOperator: mask entries must be 0 or 1");
}

Vec MaskOperator::apply(const Vec& x) const {
  require(x.size() == mask_.size(), "MaskOperator: dimension mismatch");
  return mask_.cwiseProduct(x);
}

BlurOperator::BlurOperator(int height, int width, Mat kernel) : h_(height), w_(width), k_(std::move(kernel)) {
  require(height > 0 && width > 0, "BlurOperator: image size must be positive");
  require(k_.rows() % 2 == 1 && k_.cols() % 2 == 1, "BlurOperator: kernel dimensions must be odd");
}

Vec BlurOperator::apply(const Vec& x) const {
  require(x.size() == in_dim(), "BlurOperator: dimension mismatch");
  const int ch = static_cast<int>(k_.rows() / 2), cw = static_cast<int>(k_.cols() / 2);
  Vec y = Vec::Zero(x.size());
  for (int i = 0; i < h_; ++i)
    for (int j = 0; j < w_; ++j) {
      double acc = 0.0;
      for (int u = 0; u < k_.rows(); ++u) {
        const int si = i - (u - ch);
        if (si < 0 || si >= h_) continue;
        for (int v = 0; v < k_.cols(); ++v) {
          const int sj = j - (v - cw);
          if (sj < 0 || sj >= w_) continue;
          acc += k_(u, v) * x[si * w_ + sj];
        }
      }
      y[i * w_ + j] = acc;
    }
  return y;
}

Vec BlurOperator::adjoint(const Vec& y) const {
  require(y.size() == out_dim(), "BlurOperator: dimension mismatch");
  const int ch = static_cast<int>(k_.rows() / 2), cw = static_cast<int>(k_.cols() / 2);
  Vec x = Vec::Zero(y.size());
  for (int i = 0; i < h_; ++i)
    for (int j = 0; j < w_; ++j) {
      double acc = 0.0;
      for (int u = 0; u < k_.rows(); ++u) {
        const int ti = i + (u - ch);
        if (ti < 0 || ti >= h_) continue;
        for (int v = 0; v < k_.cols(); ++v) {
          const int tj = j + (v - cw);
          if (tj < 0 || tj >= w_) continue;
          acc += k_(u, v) * y[ti * w_ + tj];
        }
      }
      x[i * w_ + j] = acc;
    }
  return x;
}

Mat gaussian_kernel(int size, double sigma) {
  require(size >= 1 && size % 2 == 1, "gaussian_kernel: size must be odd and positive");
  require(sigma > 0.0, "gaussian_kernel: sigma must be positive");
  const int c = size / 2;
  Mat k(size, size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double r2 = static_cast<double>((i - c) * (i - c) + (j - c) * (j - c));
      k(i, j) = std::exp(-r2 / (2.0 * sigma * sigma));
    }
  return k / k.sum();
}

DownsampleOperator::DownsampleOperator(int height, int width, int factor)
    : h_(height), w_(width), f_(factor) {
  require(factor >= 1 && height % factor == 0 && width % factor == 0,
          "DownsampleOperator: image size must be divisible by the factor");
}

Vec DownsampleOperator::apply(const Vec& x) const {
  require(x.size() == in_dim(), "DownsampleOperator: dimension mismatch");
  const int lw = w_ / f_;
  Vec y = Vec::Zero(out_dim());
  const double scale = 1.0 / (f_ * f_);
  for (int i = 0; i < h_; ++i)
    for (int j = 0; j < w_; ++j) y[(i / f_) * lw + j / f_] += scale * x[i * w_ + j];
  return y;
}

Vec DownsampleOperator::adjoint(const Vec& y) const {
  require(y.size() == out_dim(), "DownsampleOperator: dimension mismatch");
  const int lw = w_ / f_;
  Vec x(in_dim());
  const double scale = 1.0 / (f_ * f_);
  for (int i = 0; i < h_; ++i)
    for (int j = 0; j < w_; ++j) x[i * w_ + j] = scale * y[(i / f_) * lw + j / f_];
  return x;
}

Vec MatrixOperator::apply(const Vec& x) const {
  require(x.size() == a_.cols(), "MatrixOperator: dimension mismatch");
  return a_ * x;
}

Vec MatrixOperator::adjoint(const Vec& y) const {
  require(y.size() == a_.rows(), "MatrixOperator: dimension mismatch");
  return a_.transpose() * y;
}

std::unique_ptr<LinearOperator> op_mask(Vec mask) { return std::make_unique<MaskOperator>(std::move(mask)); }
std::unique_ptr<LinearOperator> op_blur(int height, int width, Mat kernel) {
  return std::make_unique<BlurOperator>(height, width, std::move(kernel));
}
std::unique_ptr<LinearOperator> op_downsample(int height, int width, int factor) {
  return std::make_unique<DownsampleOperator>(height, width, factor);
}
std::unique_ptr<LinearOperator> op_identity(Eigen::Index n) {
  return std::make_unique<MaskOperator>(Vec::Ones(n));
}

// --- CG ---------------------------------------------------------------------

CgResult cg_solve_detailed(const LinearOperator& a, const Vec& y, double lambda, const Vec& x_ref,
                           double tol, int max_iter) {
  require(y.size() == a.out_dim(), "cg_solve: measurement dimension mismatch");
  require(x_ref.size() == a.in_dim(), "cg_solve: reference dimension mismatch");
  require(lambda >= 0.0 && std::isfinite(lambda), "cg_solve: lambda must be finite and nonnegative");
  require(tol > 0.0 && max_iter >= 0, "cg_solve: invalid tolerance or iteration limit");

  auto normal_op = [&](const Vec& v) -> Vec { return a.adjoint(a.apply(v)) + lambda * v; };
  const Vec b = a.adjoint(y) + lambda * x_ref;
  const double b_norm = b.norm();
  const double scale = b_norm > 0.0 ? b_norm : 1.0;

  CgResult res{x_ref, 0, 0.0};
  Vec r = b - normal_op(res.x);
  double rr = r.squaredNorm();
  res.relative_residual = std::sqrt(rr) / scale;
  if (res.relative_residual < tol) return res;
  Vec p = r;
  for (int it = 1; it <= max_iter; ++it) {
    const Vec hp = normal_op(p);
    const double php = p.dot(hp);
    if (!(php > 0.0)) break;  // breakdown: operator not SPD on this direction
    const double alpha = rr / php;
    res.x += alpha * p;
    r -= alpha * hp;
    const double rr_new = r.squaredNorm();
    res.iterations = it;
    res.relative_residual = std::sqrt(rr_new) / scale;
    if (res.relative_residual < tol) {
      // Confirm against the true residual; recurrence drift can understate it.
      const double true_rel = (b - normal_op(res.x)).norm() / scale;
      if (true_rel < tol) {
        res.relative_residual = true_rel;
        return res;
      }
      r = b - normal_op(res.x);
      p = r;
      rr = r.squaredNorm();
      continue;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  std::ostringstream os;
  os << "cg_solve: relative residual " << res.relative_residual << " >= " << tol << " after "
     << res.iterations << " iterations";
  throw ConvergenceError(os.str());
}

Vec cg_solve(const LinearOperator& a, const Vec& y, double lambda, const Vec& x_ref, double tol,
             int max_iter) {
  return cg_solve_detailed(a, y, lambda, x_ref, tol, max_iter).x;
}

std::optional<Vec> DataConsistency::prox(const Vec& center, double weight) const {
  if (std::isinf(weight) || weight <= 0.0) return std::nullopt;
  // argmin ||z - c||^2 + w ||y - A z||^2  ==  argmin ||y - A z||^2 + (1/w) ||z - c||^2
  return cg_solve(*a_, y_, 1.0 / weight, center);
}

Vec data_consistency_prox(const Vec& y, const LinearOperator& a, const LinearAutoencoder& ae,
                          const Vec& z_hat, double lambda, double tol, int max_iter) {
  return cg_solve(a, y, lambda, ae.decode(z_hat), tol, max_iter);
}

// --- closed-form and DPS updates ---------------------------------------------

Vec inpaint_combined_update(const Vec& z_hat_tgt, const Vec& z_hat_null, const Vec& z_hat_y,
                            const Vec& mask, double alpha_bar_t) {
  const auto d = z_hat_null.size();
  require(z_hat_tgt.size() == d && z_hat_y.size() == d && mask.size() == d,
          "inpaint_combined_update: dimension mismatch");
  const double a = alpha_bar_t;
  const Vec inside = a * z_hat_tgt + (1.0 - a) * (1.0 - a) * z_hat_null + a * (1.0 - a) * z_hat_y;
  const Vec outside = (1.0 - a) * z_hat_null + a * z_hat_y;
  return (mask.array() != 0.0).select(inside, outside);
}

Vec dps_gradient(const Vec& z_hat, double alpha_bar_t, const LinearAutoencoder& ae,
                 const LinearOperator& a, const Vec& y) {
  require(alpha_bar_t > 0.0, "dps_gradient: alpha_bar must be positive");
  const Vec r = a.apply(ae.decode(z_hat)) - y;
  const double rn = r.norm();
  if (rn == 0.0) return Vec::Zero(z_hat.size());
  return ae.encode(a.adjoint(r)) / (std::sqrt(alpha_bar_t) * rn);
}

Vec dps_step(const Vec& z_next, const Vec& z_hat, double alpha_bar_t, const LinearAutoencoder& ae,
             const LinearOperator& a, const Vec& y, double rho) {
  require(z_next.size() == z_hat.size(), "dps_step: dimension mismatch");
  if (rho == 0.0) return z_next;
  return z_next - rho * dps_gradient(z_hat, alpha_bar_t, ae, a, y);
}

std::set<int> guided_steps(const InpaintConfig& cfg) {
  std::set<int> out;
  if (!cfg.use_gamma) return out;
  require(cfg.gamma_mod >= 1, "guided_steps: modulus must be positive");
  const double limit = cfg.gamma_fraction * cfg.nfe;
  for (int i = 1; i <= cfg.nfe; ++i) {
    if (i % cfg.gamma_mod == 0 && i <= limit + 1e-9) out.insert(i);
  }
  return out;
}

double dps_rho(const InpaintConfig& cfg, double residual_norm, double alpha_bar_t,
               double alpha_bar_prev) {
  switch (cfg.rho_mode) {
    case RhoMode::Scaled:
      return cfg.rho * residual_norm * std::sqrt(alpha_bar_t * alpha_bar_prev);
    case RhoMode::Constant:
      return cfg.rho;
  }
  return 0.0;
}

Vec latent_mask_from_pixels(const LinearAutoencoder& ae, const Vec& pixel_mask) {
  const Vec touched = ae.encode_matrix().cwiseAbs() * pixel_mask.cwiseAbs();
  return (touched.array() > 0.0).cast<double>();
}

// --- inpainting ---------------------------------------------------------------

Vec inpaint(const InpaintProblem& problem, const EpsilonModel& m, const LinearAutoencoder& ae,
            const NoiseSchedule& s, const InpaintConfig& cfg, Rng& rng, std::vector<Vec>* trace) {
  require(problem.a != nullptr, "inpaint: missing measurement operator");
  const LinearOperator& a = *problem.a;
  require(problem.y.size() == a.out_dim(), "inpaint: measurement dimension mismatch");
  require(a.in_dim() == ae.signal_dim(), "inpaint: operator and decoder disagree on signal size");
  require(m.dim() == ae.latent_dim(), "inpaint: model and encoder disagree on latent size");
  require(cfg.lambda_cg > 0.0, "inpaint: lambda_cg must be positive");
  problem.conditions.validate(ae.latent_dim());

  const TimestepPlan fwd = plan_timesteps(s, cfg.nfe, Direction::Forward);
  const TimestepPlan rev = plan_timesteps(s, cfg.nfe, Direction::Reverse);
  const std::set<int> gamma = guided_steps(cfg);

  // z_0 <- E(A^T y): the measurement is lifted to signal space before encoding.
  const Vec z0 = ae.encode(a.adjoint(problem.y));
  Vec z = ddim_invert(z0, m, Condition::null(), fwd, s).z;

  for (std::size_t idx = 0; idx < rev.size(); ++idx) {
    const int loop_index = cfg.nfe - static_cast<int>(idx);
    const int t = rev.steps[idx];
    const int t_prev = rev.prev(idx);
    const double ab = s.alpha_bar(t);
    const double ab_prev = s.alpha_bar(t_prev);
    const Vec eps_null = m.predict(z, t, Condition::null());
    const double sigma = ddim_sigma(s, t, t_prev, 1.0, SigmaMode::Explicit);
    const Vec eps = rng.normal_vec(z.size());
    const Vec z_null = tweedie(z, ab, eps_null);

    if (gamma.count(loop_index)) {
      const Vec x_y = data_consistency_prox(problem.y, a, ae, z_null, cfg.lambda_cg, cfg.cg_tol,
                                            cfg.cg_max_iter);
      const Vec z_y = ae.encode(x_y);
      Vec z_bar = (1.0 - ab) * z_null + ab * z_y;
      for (const auto& region : problem.conditions.regions) {
        if (region.mask.sum() == 0.0) continue;
        const Vec z_tgt = tweedie(z, ab, m.predict(z, t, region.cond));
        z_bar = region.mask.select(inpaint_combined_update(z_tgt, z_null, z_y, region.mask, ab), z_bar);
      }
      z = renoise(z_bar, eps_null, eps, sigma, ab_prev);
    } else {
      const Vec z_next = renoise(z_null, eps_null, eps, sigma, ab_prev);
      const double rn = (a.apply(ae.decode(z_null)) - problem.y).norm();
      z = dps_step(z_next, z_null, ab, ae, a, problem.y, dps_rho(cfg, rn, ab, ab_prev));
    }
    if (!z.allFinite()) throw ConvergenceError("inpaint: latent became non-finite");
    if (trace) trace->push_back(z);
  }
  return ae.decode(z);
}

// --- vectorized restoration ---------------------------------------------------

VectorizeResult vectorize_restore(const Vec& y, const LinearOperator& a, const BlobScene& scene0,
                                  const EpsilonModel& m, const LinearAutoencoder& ae,
                                  const NoiseSchedule& s, const VectorizeConfig& cfg, Rng& rng,
                                  std::vector<Vec>* trace) {
  require(y.size() == a.out_dim(), "vectorize_restore: measurement dimension mismatch");
  require(a.in_dim() == static_cast<Eigen::Index>(scene0.height) * scene0.width,
          "vectorize_restore: operator does not match the raster size");
  require(ae.signal_dim() == a.in_dim() && m.dim() == ae.latent_dim(),
          "vectorize_restore: encoder/model dimensions do not match the raster");
  require(cfg.iterations >= 0 && cfg.iterations <= s.T(),
          "vectorize_restore: iterations must lie in [0, T]");
  require(cfg.lambda_sds >= 0.0 && cfg.lambda_dc >= 0.0, "vectorize_restore: weights must be nonnegative");

  const BlobGenerator gen(scene0.height, scene0.width, static_cast<int>(scene0.blobs.size()));
  Vec psi = scene0.to_params();
  VectorizeResult out;
  out.initial_residual = (y - a.apply(gen.render(psi))).norm();
  if (cfg.iterations == 0) {
    out.scene = scene0;
    out.final_residual = out.initial_residual;
    return out;
  }

  const TimestepPlan plan = plan_timesteps(s, cfg.iterations, Direction::Reverse);
  const Vec lr_scale = gen.learning_rate_scale();
  AdamState adam(psi.size(), cfg.lr.start, cfg.beta1, cfg.beta2);
  Vec eps_carry = rng.normal_vec(ae.latent_dim());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int t = plan.steps[i];
    const double ab = s.alpha_bar(t);
    const Vec eps = rng.normal_vec(ae.latent_dim());
    Vec eps_tilde = eps_carry;
    if (i > 0) {
      eps_tilde = ddim_noise(eps_carry, eps, ddim_sigma(s, plan.steps[i - 1], t, cfg.eta), ab);
    }
    const Vec x = gen.render(psi);
    const Vec z = ae.encode(x);
    const Vec z_t = forward_noise(z, ab, eps_tilde);
    const Vec eps_hat = cfg_epsilon(m, z_t, t, cfg.cond, cfg.omega);
    const Vec z_hat = tweedie(z_t, ab, eps_hat);
    const double gamma = ab;
    const Vec gx = 2.0 * (1.0 - gamma) * cfg.lambda_sds * ae.decode(z - z_hat) +
                   2.0 * gamma * cfg.lambda_dc * a.adjoint(a.apply(x) - y);
    const Vec grad = gen.adjoint_jacobian_apply(psi, gx);
    adam.learning_rate = cfg.lr(static_cast<int>(i), static_cast<int>(plan.size()));
    adam_step(adam, psi, grad, lr_scale);
    if (!psi.allFinite() || psi.norm() > cfg.divergence_norm) {
      std::ostringstream os;
      os << "vectorize_restore diverged at iteration " << i << " (t = " << t << ")";
      throw ConvergenceError(os.str());
    }
    eps_carry = eps_hat;
    if (trace) trace->push_back(psi);
  }
  out.scene = BlobScene::from_params(scene0.height, scene0.width, psi);
  out.final_residual = (y - a.apply(gen.render(psi))).norm();
  return out;
}

}  // namespace dreamsampler
