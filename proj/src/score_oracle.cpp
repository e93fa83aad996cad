#include "dreamsampler/score_oracle.hpp"

#include "dreamsampler/adam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace dreamsampler {

GmmPrior::GmmPrior(std::vector<double> weights, std::vector<Vec> means,
                   std::vector<Mat> covariances)
    : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
  require(!means_.empty(), "GmmPrior: at least one component required");
  require(weights_.size() == means_.size() && covs_.size() == means_.size(),
          "GmmPrior: weights, means and covariances must have one entry per component");
  const auto d = means_.front().size();
  require(d > 0, "GmmPrior: empty mean vector");
  double total = 0.0;
  for (double w : weights_) {
    require(w >= 0.0, "GmmPrior: weights must be nonnegative");
    total += w;
  }
  require(std::abs(total - 1.0) < 1e-12, "GmmPrior: weights must sum to 1");
  for (std::size_t k = 0; k < means_.size(); ++k) {
    require(means_[k].size() == d, "GmmPrior: inconsistent mean dimensions");
    const Mat& S = covs_[k];
    require(S.rows() == d && S.cols() == d, "GmmPrior: covariance shape mismatch");
    require((S - S.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, S.cwiseAbs().maxCoeff()),
            "GmmPrior: covariance must be symmetric");
    Eigen::LLT<Mat> llt(S);
    require(llt.info() == Eigen::Success, "GmmPrior: covariance must be positive definite");
    const Mat off = S - Mat(S.diagonal().asDiagonal());
    diag_.push_back(off.cwiseAbs().maxCoeff() == 0.0 ? std::optional<Vec>(S.diagonal())
                                                     : std::nullopt);
  }
}

GmmPrior GmmPrior::isotropic(std::vector<Vec> means, double sigma) {
  require(sigma > 0.0, "GmmPrior::isotropic: sigma must be positive");
  const auto K = means.size();
  require(K > 0, "GmmPrior::isotropic: at least one component required");
  const auto d = means.front().size();
  std::vector<Mat> covs(K, Mat::Identity(d, d) * sigma * sigma);
  return GmmPrior(std::vector<double>(K, 1.0 / static_cast<double>(K)), std::move(means),
                  std::move(covs));
}

GmmPrior GmmPrior::default_toy() {
  return isotropic({Vec::Map(std::array{-2.0, 0.0}.data(), 2),
                    Vec::Map(std::array{2.0, 0.0}.data(), 2)},
                   0.3);
}

int GmmPrior::nearest_mean(const Vec& z) const {
  require(z.size() == dim(), "nearest_mean: dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < components(); ++k) {
    const double d2 = (z - means_[k]).squaredNorm();
    if (d2 < best_d) {
      best_d = d2;
      best = k;
    }
  }
  return best;
}

namespace {

struct ComponentEval {
  double log_weighted;  // log w_k + log N(z; m_k, C_k)
  Vec precision_residual;  // C_k^{-1} (z - m_k)
};

ComponentEval eval_component(const GmmPrior& prior, int k, double log_w, const Vec& z, double ab) {
  const Eigen::Index d = z.size();
  const Vec r = z - std::sqrt(ab) * prior.mean(k);
  double logdet = 0.0;
  Vec pr;
  if (const auto& diag = prior.diagonal(k)) {
    const Vec c = ab * diag->array() + (1.0 - ab);
    pr = r.array() / c.array();
    logdet = c.array().log().sum();
  } else {
    Mat C = ab * prior.covariance(k);
    C.diagonal().array() += 1.0 - ab;
    Eigen::LLT<Mat> llt(C);
    pr = llt.solve(r);
    logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  }
  const double quad = r.dot(pr);
  const double log_n =
      -0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + logdet + quad);
  return {log_w + log_n, std::move(pr)};
}

std::vector<std::pair<int, double>> active_components(const GmmPrior& prior, Condition c) {
  if (c.is_null()) {
    std::vector<std::pair<int, double>> out;
    for (int k = 0; k < prior.components(); ++k) {
      if (prior.weight(k) > 0.0) out.emplace_back(k, std::log(prior.weight(k)));
    }
    return out;
  }
  require(c.cls < prior.components(), "Condition: class index out of range");
  return {{c.cls, 0.0}};
}

void check_args(const GmmPrior& prior, const NoiseSchedule& s, const Vec& z, int t) {
  require(z.size() == prior.dim(), "gmm: dimension mismatch between latent and prior");
  require(t >= 1 && t <= s.T(), "gmm: timestep out of range");
}

}  // namespace

double marginal_log_density(const GmmPrior& prior, const NoiseSchedule& s, const Vec& z, int t,
                            Condition c) {
  check_args(prior, s, z, t);
  const double ab = s.alpha_bar(t);
  std::vector<double> logs;
  for (auto [k, lw] : active_components(prior, c)) {
    logs.push_back(eval_component(prior, k, lw, z, ab).log_weighted);
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - mx);
  return mx + std::log(acc);
}

Vec gmm_epsilon(const GmmPrior& prior, const NoiseSchedule& s, const Vec& z_t, int t,
                Condition c) {
  check_args(prior, s, z_t, t);
  const double ab = s.alpha_bar(t);
  std::vector<ComponentEval> evals;
  for (auto [k, lw] : active_components(prior, c)) {
    evals.push_back(eval_component(prior, k, lw, z_t, ab));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& e : evals) mx = std::max(mx, e.log_weighted);
  double norm = 0.0;
  for (const auto& e : evals) norm += std::exp(e.log_weighted - mx);
  // grad log p_t = -sum_k r_k C_k^{-1}(z - m_k)
  Vec weighted = Vec::Zero(z_t.size());
  for (const auto& e : evals) {
    weighted += (std::exp(e.log_weighted - mx) / norm) * e.precision_residual;
  }
  return std::sqrt(1.0 - ab) * weighted;
}

Vec cfg_epsilon(const EpsilonModel& m, const Vec& z_t, int t, Condition c, double omega) {
  const Vec eps_null = m.predict(z_t, t, Condition::null());
  if (c.is_null()) return eps_null;
  const Vec eps_c = m.predict(z_t, t, c);
  return eps_null + omega * (eps_c - eps_null);
}

// ---------------------------------------------------------------------------

namespace {

Mat xavier(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / (rows + cols));
  Mat w(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) w(i, j) = rng.uniform(-bound, bound);
  return w;
}

}  // namespace

MlpDenoiser::MlpDenoiser(int dim, int hidden, double data_var, NoiseSchedule schedule,
                         std::uint64_t seed)
    : dim_(dim), data_var_(data_var), schedule_(std::move(schedule)) {
  require(dim > 0 && hidden > 0, "MlpDenoiser: dimensions must be positive");
  require(data_var >= 0.0, "MlpDenoiser: data variance must be nonnegative");
  Rng rng = Rng::stream(seed, "mlp-init");
  const int in = dim + 2;
  w1_ = xavier(hidden, in, rng);
  b1_ = Mat::Zero(hidden, 1);
  w2_ = xavier(hidden, hidden, rng);
  b2_ = Mat::Zero(hidden, 1);
  w3_ = xavier(dim, hidden, rng);
  b3_ = Mat::Zero(dim, 1);
  skip_ = Mat::Zero(dim, dim);
}

std::vector<Mat*> MlpDenoiser::parameters() {
  return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_, &skip_};
}

Mat MlpDenoiser::features(const Mat& z_t, const std::vector<int>& t) const {
  const Eigen::Index n = z_t.cols();
  Mat x(dim_ + 2, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double ab = schedule_.alpha_bar(t[static_cast<std::size_t>(j)]);
    const double c_in = 1.0 / std::sqrt(ab * data_var_ + 1.0 - ab);
    x.block(0, j, dim_, 1) = c_in * z_t.col(j);
    x(dim_, j) = std::sqrt(ab);
    x(dim_ + 1, j) = std::sqrt(1.0 - ab);
  }
  return x;
}

Vec MlpDenoiser::predict(const Vec& z_t, int t, Condition) const {
  require(z_t.size() == dim_, "MlpDenoiser: dimension mismatch");
  const Mat x = features(z_t, {t});
  const Mat h1 = (w1_ * x + b1_).array().tanh();
  const Mat h2 = (w2_ * h1 + b2_).array().tanh();
  return w3_ * h2 + b3_ + skip_ * x.topRows(dim_);
}

double MlpDenoiser::loss(const Mat& z_t, const std::vector<int>& t, const Mat& eps,
                         std::vector<Mat>* grads) const {
  const Eigen::Index n = z_t.cols();
  const Mat x = features(z_t, t);
  const Mat h1 = (w1_ * x + b1_.replicate(1, n)).array().tanh();
  const Mat h2 = (w2_ * h1 + b2_.replicate(1, n)).array().tanh();
  const Mat out = w3_ * h2 + b3_.replicate(1, n) + skip_ * x.topRows(dim_);
  const Mat diff = out - eps;
  const double value = diff.squaredNorm() / static_cast<double>(n);
  if (grads) {
    const Mat g_out = 2.0 * diff / static_cast<double>(n);
    const Mat g_h2 = (w3_.transpose() * g_out).array() * (1.0 - h2.array().square());
    const Mat g_h1 = (w2_.transpose() * g_h2).array() * (1.0 - h1.array().square());
    *grads = {g_h1 * x.transpose(),  g_h1.rowwise().sum(), g_h2 * h1.transpose(),
              g_h2.rowwise().sum(),  g_out * h2.transpose(), g_out.rowwise().sum(),
              g_out * x.topRows(dim_).transpose()};
  }
  return value;
}

MlpDenoiser train_denoiser(const Mat& data, const NoiseSchedule& s,
                           const DenoiserTrainConfig& config) {
  require(data.cols() > 0 && data.rows() > 0, "train_denoiser: empty dataset");
  require(data.allFinite(), "train_denoiser: dataset has non-finite entries");
  require(config.t_min >= 1 && config.t_min <= s.T(), "train_denoiser: t_min out of range");
  require(config.batch > 0 && config.window > 0 && config.patience > 0 && config.steps >= 0,
          "train_denoiser: invalid batch/window/patience/steps");
  const int d = static_cast<int>(data.rows());
  const Vec mean = data.rowwise().mean();
  const double data_var =
      (data.colwise() - mean).squaredNorm() / static_cast<double>(data.cols() * d) +
      mean.squaredNorm() / d;
  MlpDenoiser model(d, config.hidden, data_var, s, config.seed);
  if (config.steps == 0) return model;

  auto params = model.parameters();
  Eigen::Index total = 0;
  for (Mat* p : params) total += p->size();
  Vec flat(total);
  auto gather = [&](const std::vector<Mat>& src, Vec& dst) {
    Eigen::Index off = 0;
    for (const Mat& m : src) {
      dst.segment(off, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
      off += m.size();
    }
  };
  {
    std::vector<Mat> cur;
    for (Mat* p : params) cur.push_back(*p);
    gather(cur, flat);
  }
  AdamState adam(total, config.learning_rate);
  Rng rng = Rng::stream(config.seed, "mlp-train");

  Mat z(d, config.batch), eps(d, config.batch);
  std::vector<int> ts(static_cast<std::size_t>(config.batch));
  std::vector<Mat> grads;
  Vec gflat(total);
  double window_sum = 0.0;
  double first_window = std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int step = 1; step <= config.steps; ++step) {
    for (int j = 0; j < config.batch; ++j) {
      const int t = rng.uniform_int(config.t_min, s.T());
      const double ab = s.alpha_bar(t);
      const int idx = rng.uniform_int(0, static_cast<int>(data.cols()) - 1);
      eps.col(j) = rng.normal_vec(d);
      z.col(j) = std::sqrt(ab) * data.col(idx) + std::sqrt(1.0 - ab) * eps.col(j);
      ts[static_cast<std::size_t>(j)] = t;
    }
    window_sum += model.loss(z, ts, eps, &grads);
    gather(grads, gflat);
    if (!gflat.allFinite()) throw ConvergenceError("train_denoiser: gradient became non-finite");
    adam_step(adam, flat, gflat);
    Eigen::Index off = 0;
    for (Mat* p : params) {
      *p = Eigen::Map<const Mat>(flat.data() + off, p->rows(), p->cols());
      off += p->size();
    }

    if (step % config.window == 0) {
      const double avg = window_sum / config.window;
      window_sum = 0.0;
      if (!std::isfinite(avg)) throw ConvergenceError("train_denoiser: loss became non-finite");
      if (first_window == std::numeric_limits<double>::infinity()) first_window = avg;
      if (avg < best) {
        best = avg;
        stale = 0;
      } else if (++stale >= config.patience) {
        if (best >= first_window) {
          throw ConvergenceError("train_denoiser: loss did not decrease within the patience window");
        }
        break;  // plateau after progress: stop early
      }
    }
  }
  return model;
}

}  // namespace dreamsampler
