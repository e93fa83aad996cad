#pragma once

#include "dreamsampler/types.hpp"

#include <vector>

namespace dreamsampler {

/// Differentiable map from parameters psi to a signal.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual Eigen::Index param_count() const = 0;
  virtual Eigen::Index output_dim() const = 0;
  virtual Vec render(const Vec& psi) const = 0;
  /// J(psi)^T v
  virtual Vec adjoint_jacobian_apply(const Vec& psi, const Vec& v) const = 0;
};

class IdentityGenerator final : public Generator {
 public:
  explicit IdentityGenerator(Eigen::Index dim) : dim_(dim) {}
  Eigen::Index param_count() const override { return dim_; }
  Eigen::Index output_dim() const override { return dim_; }
  Vec render(const Vec& psi) const override;
  Vec adjoint_jacobian_apply(const Vec& psi, const Vec& v) const override;

 private:
  Eigen::Index dim_;
};

/// Linear encoder/decoder pair with orthonormal decoder columns, so that
/// encode(decode(z)) = z exactly and decode(encode(x)) projects onto the range.
class LinearAutoencoder {
 public:
  explicit LinearAutoencoder(Mat decode_matrix);

  Eigen::Index signal_dim() const { return decode_.rows(); }
  Eigen::Index latent_dim() const { return decode_.cols(); }
  const Mat& decode_matrix() const { return decode_; }
  Mat encode_matrix() const { return decode_.transpose(); }

  Vec encode(const Vec& x) const;
  Vec decode(const Vec& z) const;

 private:
  Mat decode_;
};

/// Random orthonormal decoder columns (QR of a Gaussian matrix).
LinearAutoencoder make_linear_autoencoder(int d, int k, std::uint64_t seed);

/// Spatial autoencoder for height x width images: each latent cell covers a
/// factor x factor pixel block with value 1/factor (orthonormal columns).
/// Pixels and latent cells are stored row-major.
LinearAutoencoder make_pooling_autoencoder(int height, int width, int factor);

/// The decoder viewed as a generator g(z) = D z.
class DecoderGenerator final : public Generator {
 public:
  explicit DecoderGenerator(const LinearAutoencoder& ae) : ae_(&ae) {}
  Eigen::Index param_count() const override { return ae_->latent_dim(); }
  Eigen::Index output_dim() const override { return ae_->signal_dim(); }
  Vec render(const Vec& psi) const override { return ae_->decode(psi); }
  Vec adjoint_jacobian_apply(const Vec&, const Vec& v) const override { return ae_->encode(v); }

 private:
  const LinearAutoencoder* ae_;
};

// ---------------------------------------------------------------------------
// Gaussian blobs: pixel (row i, col j) sits at (x, y) = (j, i) and receives
//   background + sum_k a_k exp(-|p - c_k|^2 / (2 s_k^2)),  s_k = exp(log_scale_k).

struct Blob {
  double amplitude = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double log_scale = 0.0;
};

struct BlobScene {
  int height = 16;
  int width = 16;
  double background = 0.0;
  std::vector<Blob> blobs;

  /// [background, (amplitude, cx, cy, log_scale) per blob]
  Vec to_params() const;
  static BlobScene from_params(int height, int width, const Vec& psi);
};

Vec render_blobs(const BlobScene& scene);
/// Analytic partials of render_blobs contracted with v, in to_params() layout.
Vec blob_adjoint_jacobian(const BlobScene& scene, const Vec& v);

/// Blobs with centers uniform over the grid and amplitudes uniform in [0.7, 1].
BlobScene random_blob_scene(int height, int width, int blobs, double init_scale, double background,
                            Rng& rng);

class BlobGenerator final : public Generator {
 public:
  BlobGenerator(int height, int width, int blobs) : height_(height), width_(width), blobs_(blobs) {}
  Eigen::Index param_count() const override { return 1 + 4 * blobs_; }
  Eigen::Index output_dim() const override { return static_cast<Eigen::Index>(height_) * width_; }
  Vec render(const Vec& psi) const override;
  Vec adjoint_jacobian_apply(const Vec& psi, const Vec& v) const override;

  /// Per-parameter learning-rate multipliers: geometry 1, amplitudes 1/20, background 1/200.
  Vec learning_rate_scale() const;

 private:
  int height_, width_, blobs_;
};

/// Blob-optimization learning rate at `step` of `total`: linear ramp
/// start -> peak over the first half, then cosine decay peak -> end.
struct WarmupCosine {
  double start = 0.02;
  double peak = 0.2;
  double end = 0.05;
  double operator()(int step, int total) const;
};

}  // namespace dreamsampler
