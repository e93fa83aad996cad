#include "dreamsampler/generators.hpp"

#include <cmath>
#include <numbers>

namespace dreamsampler {

Vec IdentityGenerator::render(const Vec& psi) const {
  require(psi.size() == dim_, "IdentityGenerator: parameter size mismatch");
  return psi;
}

Vec IdentityGenerator::adjoint_jacobian_apply(const Vec& psi, const Vec& v) const {
  require(psi.size() == dim_ && v.size() == dim_, "IdentityGenerator: size mismatch");
  return v;
}

LinearAutoencoder::LinearAutoencoder(Mat decode_matrix) : decode_(std::move(decode_matrix)) {
  require(decode_.cols() >= 1 && decode_.cols() <= decode_.rows(),
          "LinearAutoencoder: latent dimension must lie in [1, signal dimension]");
  const Mat gram = decode_.transpose() * decode_;
  const double err = (gram - Mat::Identity(decode_.cols(), decode_.cols())).cwiseAbs().maxCoeff();
  require(err < 1e-10, "LinearAutoencoder: decoder columns must be orthonormal");
}

Vec LinearAutoencoder::encode(const Vec& x) const {
  require(x.size() == signal_dim(), "LinearAutoencoder::encode: dimension mismatch");
  return decode_.transpose() * x;
}

Vec LinearAutoencoder::decode(const Vec& z) const {
  require(z.size() == latent_dim(), "LinearAutoencoder::decode: dimension mismatch");
  return decode_ * z;
}

LinearAutoencoder make_linear_autoencoder(int d, int k, std::uint64_t seed) {
  require(d >= 1 && k >= 1, "make_linear_autoencoder: dimensions must be positive");
  require(k <= d, "make_linear_autoencoder: k must not exceed d");
  Rng rng = Rng::stream(seed, "autoencoder");
  Mat g(d, k);
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < d; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(d, k);
  return LinearAutoencoder(std::move(q));
}

LinearAutoencoder make_pooling_autoencoder(int height, int width, int factor) {
  require(factor >= 1 && height % factor == 0 && width % factor == 0,
          "make_pooling_autoencoder: image size must be divisible by the factor");
  const int lh = height / factor, lw = width / factor;
  Mat dec = Mat::Zero(static_cast<Eigen::Index>(height) * width, static_cast<Eigen::Index>(lh) * lw);
  const double v = 1.0 / factor;
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) dec(i * width + j, (i / factor) * lw + j / factor) = v;
  return LinearAutoencoder(std::move(dec));
}

Vec BlobScene::to_params() const {
  Vec psi(1 + 4 * static_cast<Eigen::Index>(blobs.size()));
  psi[0] = background;
  for (std::size_t k = 0; k < blobs.size(); ++k) {
    const auto o = static_cast<Eigen::Index>(1 + 4 * k);
    psi[o] = blobs[k].amplitude;
    psi[o + 1] = blobs[k].cx;
    psi[o + 2] = blobs[k].cy;
    psi[o + 3] = blobs[k].log_scale;
  }
  return psi;
}

BlobScene BlobScene::from_params(int height, int width, const Vec& psi) {
  require(psi.size() >= 1 && (psi.size() - 1) % 4 == 0, "BlobScene: malformed parameter vector");
  BlobScene s;
  s.height = height;
  s.width = width;
  s.background = psi[0];
  for (Eigen::Index o = 1; o < psi.size(); o += 4) {
    s.blobs.push_back({psi[o], psi[o + 1], psi[o + 2], psi[o + 3]});
  }
  return s;
}

Vec render_blobs(const BlobScene& scene) {
  Vec img = Vec::Constant(static_cast<Eigen::Index>(scene.height) * scene.width, scene.background);
  for (const Blob& b : scene.blobs) {
    const double inv2s2 = 0.5 * std::exp(-2.0 * b.log_scale);
    for (int i = 0; i < scene.height; ++i) {
      const double dy = i - b.cy;
      for (int j = 0; j < scene.width; ++j) {
        const double dx = j - b.cx;
        img[i * scene.width + j] += b.amplitude * std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
    }
  }
  return img;
}

Vec blob_adjoint_jacobian(const BlobScene& scene, const Vec& v) {
  require(v.size() == static_cast<Eigen::Index>(scene.height) * scene.width,
          "blob_adjoint_jacobian: cotangent size mismatch");
  Vec g = Vec::Zero(1 + 4 * static_cast<Eigen::Index>(scene.blobs.size()));
  g[0] = v.sum();
  for (std::size_t k = 0; k < scene.blobs.size(); ++k) {
    const Blob& b = scene.blobs[k];
    const double inv_s2 = std::exp(-2.0 * b.log_scale);
    double ga = 0.0, gx = 0.0, gy = 0.0, gs = 0.0;
    for (int i = 0; i < scene.height; ++i) {
      const double dy = i - b.cy;
      for (int j = 0; j < scene.width; ++j) {
        const double dx = j - b.cx;
        const double r2 = dx * dx + dy * dy;
        const double e = std::exp(-0.5 * r2 * inv_s2);
        const double w = v[i * scene.width + j];
        ga += w * e;
        const double ae = w * b.amplitude * e * inv_s2;
        gx += ae * dx;
        gy += ae * dy;
        gs += ae * r2;
      }
    }
    const auto o = static_cast<Eigen::Index>(1 + 4 * k);
    g[o] = ga;
    g[o + 1] = gx;
    g[o + 2] = gy;
    g[o + 3] = gs;
  }
  return g;
}

BlobScene random_blob_scene(int height, int width, int blobs, double init_scale, double background,
                            Rng& rng) {
  require(init_scale > 0.0, "random_blob_scene: scale must be positive");
  BlobScene s;
  s.height = height;
  s.width = width;
  s.background = background;
  for (int k = 0; k < blobs; ++k) {
    Blob b;
    b.amplitude = rng.uniform(0.7, 1.0);
    b.cx = rng.uniform(0.0, width - 1.0);
    b.cy = rng.uniform(0.0, height - 1.0);
    b.log_scale = std::log(init_scale);
    s.blobs.push_back(b);
  }
  return s;
}

Vec BlobGenerator::render(const Vec& psi) const {
  require(psi.size() == param_count(), "BlobGenerator: parameter size mismatch");
  return render_blobs(BlobScene::from_params(height_, width_, psi));
}

Vec BlobGenerator::adjoint_jacobian_apply(const Vec& psi, const Vec& v) const {
  require(psi.size() == param_count(), "BlobGenerator: parameter size mismatch");
  return blob_adjoint_jacobian(BlobScene::from_params(height_, width_, psi), v);
}

Vec BlobGenerator::learning_rate_scale() const {
  Vec s = Vec::Ones(param_count());
  s[0] = 1.0 / 200.0;
  for (Eigen::Index o = 1; o < s.size(); o += 4) s[o] = 1.0 / 20.0;
  return s;
}

double WarmupCosine::operator()(int step, int total) const {
  require(total >= 1 && step >= 0, "WarmupCosine: invalid step/total");
  if (step >= total) return end;
  const int warm = std::max(1, total / 2);
  if (step < warm) return start + (peak - start) * static_cast<double>(step) / warm;
  const int rest = std::max(1, total - warm);
  const double p = std::min(1.0, static_cast<double>(step - warm) / rest);
  return end + (peak - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace dreamsampler
