#pragma once

#include "dreamsampler/schedule.hpp"
#include "dreamsampler/types.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace dreamsampler {

/// Null (unconditional) or a class label standing in for a text prompt.
struct Condition {
  int cls = -1;

  static Condition null() { return {}; }
  static Condition of_class(int k) { return Condition{k}; }
  bool is_null() const { return cls < 0; }
  bool operator==(const Condition&) const = default;
};

/// Gaussian-mixture prior over clean latents. Each component doubles as a
/// class; Condition::null() refers to the full mixture.
class GmmPrior {
 public:
  GmmPrior(std::vector<double> weights, std::vector<Vec> means, std::vector<Mat> covariances);

  /// Equal-weight mixture with isotropic components sigma^2 I.
  static GmmPrior isotropic(std::vector<Vec> means, double sigma);
  /// Two components in R^2 at (+-2, 0), sigma 0.3, equal weights.
  static GmmPrior default_toy();

  int dim() const { return static_cast<int>(means_.front().size()); }
  int components() const { return static_cast<int>(means_.size()); }
  double weight(int k) const { return weights_[k]; }
  const Vec& mean(int k) const { return means_[k]; }
  const Mat& covariance(int k) const { return covs_[k]; }
  /// Diagonal of covariance k when the covariance is diagonal.
  const std::optional<Vec>& diagonal(int k) const { return diag_[k]; }
  /// Index of the component mean nearest to z in Euclidean distance.
  int nearest_mean(const Vec& z) const;

 private:
  std::vector<double> weights_;
  std::vector<Vec> means_;
  std::vector<Mat> covs_;
  std::vector<std::optional<Vec>> diag_;
};

/// Log-density of the time-t marginal p_t(z | c) induced by the forward process.
double marginal_log_density(const GmmPrior& prior, const NoiseSchedule& s, const Vec& z, int t,
                            Condition c);

/// Exact predicted noise -sqrt(1 - alpha_bar_t) * grad log p_t(z_t | c).
Vec gmm_epsilon(const GmmPrior& prior, const NoiseSchedule& s, const Vec& z_t, int t,
                Condition c);

class EpsilonModel {
 public:
  virtual ~EpsilonModel() = default;
  virtual int dim() const = 0;
  virtual Vec predict(const Vec& z_t, int t, Condition c) const = 0;
};

class GmmEpsilonModel final : public EpsilonModel {
 public:
  GmmEpsilonModel(GmmPrior prior, NoiseSchedule schedule)
      : prior_(std::move(prior)), schedule_(std::move(schedule)) {}

  int dim() const override { return prior_.dim(); }
  Vec predict(const Vec& z_t, int t, Condition c) const override {
    return gmm_epsilon(prior_, schedule_, z_t, t, c);
  }
  const GmmPrior& prior() const { return prior_; }
  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  GmmPrior prior_;
  NoiseSchedule schedule_;
};

/// Adapts an arbitrary callable; mostly useful for tests and ablations.
class FunctionEpsilonModel final : public EpsilonModel {
 public:
  using Fn = std::function<Vec(const Vec&, int, Condition)>;
  FunctionEpsilonModel(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
  int dim() const override { return dim_; }
  Vec predict(const Vec& z_t, int t, Condition c) const override { return fn_(z_t, t, c); }

 private:
  int dim_;
  Fn fn_;
};

/// Classifier-free guidance: eps_null + omega * (eps_c - eps_null).
Vec cfg_epsilon(const EpsilonModel& m, const Vec& z_t, int t, Condition c, double omega);

// ---------------------------------------------------------------------------
// Trained denoiser (optional; acceptance checks use the analytic oracle).

struct DenoiserTrainConfig {
  int hidden = 64;
  int steps = 4000;
  int batch = 128;
  double learning_rate = 2e-3;
  int t_min = 1;       // timesteps are drawn uniformly from [t_min, T]
  int window = 100;    // steps per loss-averaging window
  int patience = 10;   // windows without improvement over the first window => failure
  std::uint64_t seed = 0;
};

/// Two-hidden-layer tanh MLP with a linear skip path. The latent input is
/// preconditioned by 1/sqrt(alpha_bar * data_var + 1 - alpha_bar).
class MlpDenoiser final : public EpsilonModel {
 public:
  MlpDenoiser(int dim, int hidden, double data_var, NoiseSchedule schedule, std::uint64_t seed);

  int dim() const override { return dim_; }
  Vec predict(const Vec& z_t, int t, Condition c) const override;

  /// Mean squared noise-prediction loss over a batch; fills gradients when asked.
  double loss(const Mat& z_t, const std::vector<int>& t, const Mat& eps,
              std::vector<Mat>* grads) const;
  std::vector<Mat*> parameters();

 private:
  Mat features(const Mat& z_t, const std::vector<int>& t) const;

  int dim_;
  double data_var_;
  NoiseSchedule schedule_;
  // Column vectors are stored as single-column matrices so all parameters share a type.
  Mat w1_, b1_, w2_, b2_, w3_, b3_, skip_;
};

/// Fits an MlpDenoiser by denoising score matching on `data` (one sample per column).
/// Throws ConvergenceError when the windowed loss never improves on the first window.
MlpDenoiser train_denoiser(const Mat& data, const NoiseSchedule& s,
                           const DenoiserTrainConfig& config);

}  // namespace dreamsampler
