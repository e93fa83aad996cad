#pragma once

#include "dreamsampler/distill.hpp"
#include "dreamsampler/generators.hpp"
#include "dreamsampler/sampler.hpp"

#include <memory>
#include <set>
#include <vector>

namespace dreamsampler {

class LinearOperator {
 public:
  virtual ~LinearOperator() = default;
  virtual Eigen::Index in_dim() const = 0;
  virtual Eigen::Index out_dim() const = 0;
  virtual Vec apply(const Vec& x) const = 0;
  virtual Vec adjoint(const Vec& y) const = 0;
};

/// Elementwise {0,1} mask; self-adjoint.
class MaskOperator final : public LinearOperator {
 public:
  explicit MaskOperator(Vec mask);
  Eigen::Index in_dim() const override { return mask_.size(); }
  Eigen::Index out_dim() const override { return mask_.size(); }
  Vec apply(const Vec& x) const override;
  Vec adjoint(const Vec& y) const override { return apply(y); }
  const Vec& mask() const { return mask_; }

 private:
  Vec mask_;
};

/// Same-size 2-D convolution with zero padding; the adjoint is the matching correlation.
class BlurOperator final : public LinearOperator {
 public:
  BlurOperator(int height, int width, Mat kernel);
  Eigen::Index in_dim() const override { return static_cast<Eigen::Index>(h_) * w_; }
  Eigen::Index out_dim() const override { return in_dim(); }
  Vec apply(const Vec& x) const override;
  Vec adjoint(const Vec& y) const override;

 private:
  int h_, w_;
  Mat k_;
};

/// Normalized size x size Gaussian kernel (size odd).
Mat gaussian_kernel(int size, double sigma);

/// factor x factor average pooling; the adjoint spreads each value / factor^2 over its block.
class DownsampleOperator final : public LinearOperator {
 public:
  DownsampleOperator(int height, int width, int factor);
  Eigen::Index in_dim() const override { return static_cast<Eigen::Index>(h_) * w_; }
  Eigen::Index out_dim() const override { return in_dim() / (static_cast<Eigen::Index>(f_) * f_); }
  Vec apply(const Vec& x) const override;
  Vec adjoint(const Vec& y) const override;

 private:
  int h_, w_, f_;
};

class MatrixOperator final : public LinearOperator {
 public:
  explicit MatrixOperator(Mat a) : a_(std::move(a)) {}
  Eigen::Index in_dim() const override { return a_.cols(); }
  Eigen::Index out_dim() const override { return a_.rows(); }
  Vec apply(const Vec& x) const override;
  Vec adjoint(const Vec& y) const override;

 private:
  Mat a_;
};

std::unique_ptr<LinearOperator> op_mask(Vec mask);
std::unique_ptr<LinearOperator> op_blur(int height, int width, Mat kernel);
std::unique_ptr<LinearOperator> op_downsample(int height, int width, int factor);
std::unique_ptr<LinearOperator> op_identity(Eigen::Index n);

/// ||y - A z||^2, with a CG-backed prox.
class DataConsistency final : public Regularizer {
 public:
  DataConsistency(const LinearOperator& a, Vec y) : a_(&a), y_(std::move(y)) {}
  double value(const Vec& z) const override { return (y_ - a_->apply(z)).squaredNorm(); }
  Vec gradient(const Vec& z) const override { return 2.0 * a_->adjoint(a_->apply(z) - y_); }
  std::optional<Vec> prox(const Vec& center, double weight) const override;

 private:
  const LinearOperator* a_;
  Vec y_;
};

struct CgResult {
  Vec x;
  int iterations = 0;
  double relative_residual = 0.0;
};

/// Solves (A^T A + lambda I) x = A^T y + lambda x_ref by conjugate gradients,
/// starting at x_ref. Throws ConvergenceError when the relative residual is
/// still >= tol after max_iter iterations.
CgResult cg_solve_detailed(const LinearOperator& a, const Vec& y, double lambda, const Vec& x_ref,
                           double tol = 1e-8, int max_iter = 200);
Vec cg_solve(const LinearOperator& a, const Vec& y, double lambda, const Vec& x_ref,
             double tol = 1e-8, int max_iter = 200);

/// argmin_x ||y - A x||^2 + lambda ||x - D(z_hat)||^2
Vec data_consistency_prox(const Vec& y, const LinearOperator& a, const LinearAutoencoder& ae,
                          const Vec& z_hat, double lambda, double tol = 1e-8, int max_iter = 200);

/// Masked closed-form latent update. Inside the mask:
///   ab zhat_tgt + (1-ab)^2 zhat_null + ab (1-ab) zhat_y;
/// outside: (1-ab) zhat_null + ab zhat_y.
Vec inpaint_combined_update(const Vec& z_hat_tgt, const Vec& z_hat_null, const Vec& z_hat_y,
                            const Vec& mask, double alpha_bar_t);

/// Gradient w.r.t. z_t of ||A D(zhat) - y|| where zhat is the Tweedie estimate
/// with the noise prediction held fixed (d zhat / d z_t = I / sqrt(ab_t)).
/// Zero when the residual vanishes.
Vec dps_gradient(const Vec& z_hat, double alpha_bar_t, const LinearAutoencoder& ae,
                 const LinearOperator& a, const Vec& y);

/// z_next - rho * dps_gradient(...)
Vec dps_step(const Vec& z_next, const Vec& z_hat, double alpha_bar_t, const LinearAutoencoder& ae,
             const LinearOperator& a, const Vec& y, double rho);

enum class RhoMode {
  Scaled,    // rho = kappa * |residual| * sqrt(ab_t * ab_prev)
  Constant,  // rho = kappa
};

struct InpaintConfig {
  int nfe = 200;
  double lambda_cg = 1.0;
  double cg_tol = 1e-8;
  int cg_max_iter = 200;
  RhoMode rho_mode = RhoMode::Scaled;
  double rho = 0.8;
  /// Guided steps are those with loop index i (counting NFE down to 1) where
  /// i % gamma_mod == 0 and i <= gamma_fraction * NFE.
  int gamma_mod = 3;
  double gamma_fraction = 170.0 / 200.0;
  bool use_gamma = true;
};

/// Loop indices (NFE..1) at which the guided closed-form update runs.
std::set<int> guided_steps(const InpaintConfig& cfg);

double dps_rho(const InpaintConfig& cfg, double residual_norm, double alpha_bar_t,
               double alpha_bar_prev);

struct InpaintProblem {
  Vec y;                        // measurement in signal space
  const LinearOperator* a = nullptr;
  MaskedCondition conditions;   // latent-space regions to synthesize
};

/// Returns the decoded reconstruction. Stochastic renoising uses the explicit
/// sigma sqrt(ab_t) sqrt(1 - ab_prev).
Vec inpaint(const InpaintProblem& problem, const EpsilonModel& m, const LinearAutoencoder& ae,
            const NoiseSchedule& s, const InpaintConfig& cfg, Rng& rng,
            std::vector<Vec>* trace = nullptr);

/// Latent mask of the cells whose pixel block intersects a pixel mask.
Vec latent_mask_from_pixels(const LinearAutoencoder& ae, const Vec& pixel_mask);

struct VectorizeConfig {
  int iterations = 200;  // one per reverse timestep
  double lambda_sds = 2.4;
  double lambda_dc = 3.0;
  Condition cond = Condition::null();
  double omega = 1.0;
  double eta = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.9;
  WarmupCosine lr;
  double divergence_norm = 1e6;
};

struct VectorizeResult {
  BlobScene scene;
  double initial_residual = 0.0;
  double final_residual = 0.0;
};

/// Optimizes blob parameters along the reverse plan, minimizing
///   (1-gamma) l_sds ||E g(psi) - zhat(c_y)||^2 + gamma l_dc ||y - A g(psi)||^2,  gamma = ab_t.
VectorizeResult vectorize_restore(const Vec& y, const LinearOperator& a, const BlobScene& scene0,
                                  const EpsilonModel& m, const LinearAutoencoder& ae,
                                  const NoiseSchedule& s, const VectorizeConfig& cfg, Rng& rng,
                                  std::vector<Vec>* trace = nullptr);

}  // namespace dreamsampler
