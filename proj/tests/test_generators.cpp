#include "dreamsampler/adam.hpp"
#include "dreamsampler/generators.hpp"

#include <doctest.h>

#include <cmath>
#include <memory>

using namespace dreamsampler;

namespace {

// Central-difference check of J(psi)^T v against v . dg/dpsi_j.
double adjoint_fd_error(const Generator& g, const Vec& psi, const Vec& v) {
  const Vec analytic = g.adjoint_jacobian_apply(psi, v);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < psi.size(); ++j) {
    Vec p = psi, m = psi;
    const double h = 1e-6 * std::max(1.0, std::abs(psi[j]));
    p[j] += h;
    m[j] -= h;
    const double fd = v.dot(g.render(p) - g.render(m)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - analytic[j]) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

Vec naive_render(const BlobScene& s) {
  Vec out(s.height * s.width);
  for (int i = 0; i < s.height; ++i) {
    for (int j = 0; j < s.width; ++j) {
      double v = s.background;
      for (const Blob& b : s.blobs) {
        const double sc = std::exp(b.log_scale);
        const double r2 = (j - b.cx) * (j - b.cx) + (i - b.cy) * (i - b.cy);
        v += b.amplitude * std::exp(-r2 / (2 * sc * sc));
      }
      out[i * s.width + j] = v;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("identity generator") {
  const IdentityGenerator g(3);
  Vec psi(3), v(3);
  psi << 1, 2, 3;
  v << -1, 0, 4;
  CHECK(g.render(psi) == psi);
  CHECK(g.adjoint_jacobian_apply(psi, v) == v);
  CHECK_THROWS_AS(g.render(Vec::Zero(2)), ValidationError);
}

TEST_CASE("single blob rendering") {
  BlobScene s;
  s.height = 3;
  s.width = 4;
  s.background = 0.1;
  s.blobs.push_back({2.0, 1.0, 2.0, 0.0});
  const Vec img = render_blobs(s);
  REQUIRE(img.size() == 12);
  CHECK(img[2 * 4 + 1] == doctest::Approx(2.1).epsilon(1e-15));
  CHECK(img[2 * 4 + 2] == doctest::Approx(0.1 + 2.0 * std::exp(-0.5)).epsilon(1e-15));
  CHECK(img[0] == doctest::Approx(0.1 + 2.0 * std::exp(-2.5)).epsilon(1e-15));

  BlobScene empty = s;
  empty.blobs.clear();
  CHECK((render_blobs(empty).array() == 0.1).all());
}

TEST_CASE("blob rendering matches a direct loop") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    BlobScene s = random_blob_scene(9, 7, 5, rng.uniform(0.5, 3.0), rng.uniform(-1, 1), rng);
    for (Blob& b : s.blobs) b.log_scale += rng.uniform(-0.5, 0.5);
    CHECK((render_blobs(s) - naive_render(s)).norm() < 1e-13);
  }
}

TEST_CASE("scene parameter layout") {
  Rng rng(2);
  const BlobScene s = random_blob_scene(16, 16, 4, 2.0, 0.3, rng);
  const Vec p = s.to_params();
  REQUIRE(p.size() == 17);
  CHECK(p[0] == 0.3);
  CHECK(p[1] == s.blobs[0].amplitude);
  CHECK(p[2] == s.blobs[0].cx);
  CHECK(p[3] == s.blobs[0].cy);
  CHECK(p[4] == doctest::Approx(std::log(2.0)));
  const BlobScene r = BlobScene::from_params(16, 16, p);
  CHECK(r.to_params() == p);
  CHECK_THROWS_AS(BlobScene::from_params(16, 16, Vec::Zero(6)), ValidationError);
  for (const Blob& b : s.blobs) {
    CHECK(b.amplitude >= 0.7);
    CHECK(b.amplitude <= 1.0);
    CHECK(b.cx >= 0.0);
    CHECK(b.cx <= 15.0);
    CHECK(b.cy >= 0.0);
    CHECK(b.cy <= 15.0);
  }
  CHECK_THROWS_AS(random_blob_scene(16, 16, 2, 0.0, 0.0, rng), ValidationError);
}

TEST_CASE("blob adjoint on a single pixel") {
  BlobScene s;
  s.height = 1;
  s.width = 2;
  s.background = 0.0;
  s.blobs.push_back({3.0, 0.0, 0.0, 0.0});
  Vec v(2);
  v << 0.0, 1.0;  // pixel (0,1): r^2 = 1, scale 1
  const Vec g = blob_adjoint_jacobian(s, v);
  const double e = std::exp(-0.5);
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[1] == doctest::Approx(e));
  CHECK(g[2] == doctest::Approx(3.0 * e));  // d/dcx = a e (x - cx) / s^2
  CHECK(g[3] == doctest::Approx(0.0));
  CHECK(g[4] == doctest::Approx(3.0 * e));  // d/dlog s = a e r^2 / s^2
}

TEST_CASE("generator adjoints match finite differences") {
  Rng rng(41);
  const LinearAutoencoder ae = make_linear_autoencoder(12, 4, 5);
  std::vector<std::unique_ptr<Generator>> gens;
  gens.push_back(std::make_unique<IdentityGenerator>(5));
  gens.push_back(std::make_unique<DecoderGenerator>(ae));
  gens.push_back(std::make_unique<BlobGenerator>(8, 8, 3));
  for (const auto& g : gens) {
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      Vec psi = rng.normal_vec(g->param_count());
      if (dynamic_cast<BlobGenerator*>(g.get())) {
        psi = random_blob_scene(8, 8, 3, rng.uniform(1.0, 3.0), rng.uniform(0, 1), rng).to_params();
      }
      const Vec v = rng.normal_vec(g->output_dim());
      worst = std::max(worst, adjoint_fd_error(*g, psi, v));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("blob learning-rate scales") {
  const BlobGenerator g(16, 16, 2);
  const Vec s = g.learning_rate_scale();
  REQUIRE(s.size() == 9);
  CHECK(s[0] == doctest::Approx(1.0 / 200));
  CHECK(s[1] == doctest::Approx(1.0 / 20));
  CHECK(s[2] == 1.0);
  CHECK(s[3] == 1.0);
  CHECK(s[4] == 1.0);
  CHECK(s[5] == doctest::Approx(1.0 / 20));
}

TEST_CASE("linear autoencoder") {
  const LinearAutoencoder ae = make_linear_autoencoder(10, 3, 7);
  CHECK(ae.signal_dim() == 10);
  CHECK(ae.latent_dim() == 3);
  const Mat D = ae.decode_matrix();
  CHECK((D.transpose() * D - Mat::Identity(3, 3)).norm() < 1e-12);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const Vec z = rng.normal_vec(3);
    CHECK((ae.encode(ae.decode(z)) - z).norm() < 1e-12);
    const Vec x = rng.normal_vec(10);
    // Least-squares projector oracle.
    const Vec proj = D * D.colPivHouseholderQr().solve(x);
    CHECK((ae.decode(ae.encode(x)) - proj).norm() < 1e-12);
  }
  CHECK_THROWS_AS(make_linear_autoencoder(3, 4, 1), ValidationError);
  CHECK_THROWS_AS(LinearAutoencoder(2.0 * Mat::Identity(3, 2)), ValidationError);
  CHECK_THROWS_AS(ae.encode(Vec::Zero(3)), ValidationError);
  CHECK_THROWS_AS(ae.decode(Vec::Zero(10)), ValidationError);
}

TEST_CASE("pooling autoencoder") {
  const LinearAutoencoder ae = make_pooling_autoencoder(4, 6, 2);
  CHECK(ae.signal_dim() == 24);
  CHECK(ae.latent_dim() == 6);
  const Vec cst = Vec::Constant(24, 0.7);
  CHECK((ae.encode(cst) - Vec::Constant(6, 1.4)).norm() < 1e-14);
  CHECK((ae.decode(ae.encode(cst)) - cst).norm() < 1e-14);
  Vec z = Vec::Zero(6);
  z[4] = 1.0;  // latent row 1, col 1 -> pixel rows 2..3, cols 2..3
  const Vec x = ae.decode(z);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 6; ++j) {
      const bool inside = i >= 2 && j >= 2 && j <= 3;
      CHECK(x[i * 6 + j] == doctest::Approx(inside ? 0.5 : 0.0));
    }
  }
  CHECK_THROWS_AS(make_pooling_autoencoder(5, 6, 2), ValidationError);
}

TEST_CASE("warmup-cosine schedule") {
  const WarmupCosine lr;
  CHECK(lr(0, 200) == doctest::Approx(0.02));
  CHECK(lr(50, 200) == doctest::Approx(0.11));
  CHECK(lr(100, 200) == doctest::Approx(0.2));
  CHECK(lr(150, 200) == doctest::Approx(0.125));
  CHECK(lr(200, 200) == doctest::Approx(0.05));
  CHECK(lr(1, 1) == doctest::Approx(0.05));
  CHECK_THROWS_AS(lr(0, 0), ValidationError);
}

TEST_CASE("adam") {
  AdamState st(1, 0.1);
  Vec psi = Vec::Zero(1);
  adam_step(st, psi, Vec::Constant(1, 1.0));
  CHECK(psi[0] == doctest::Approx(-0.09999999900000002).epsilon(1e-14));
  adam_step(st, psi, Vec::Constant(1, -2.0));
  CHECK(psi[0] == doctest::Approx(-0.06338964652792518).epsilon(1e-14));
  CHECK(st.step == 2);

  AdamState z(3, 0.5);
  Vec p(3);
  p << 1, 2, 3;
  const Vec before = p;
  adam_step(z, p, Vec::Zero(3));
  CHECK(p == before);

  AdamState steady(2, 0.01);
  Vec q = Vec::Zero(2);
  Vec g(2);
  g << 3.0, -0.5;
  Vec last = q;
  for (int i = 0; i < 5000; ++i) {
    last = q;
    adam_step(steady, q, g);
  }
  CHECK(std::abs(std::abs(q[0] - last[0]) - 0.01) < 1e-4);
  CHECK(std::abs(std::abs(q[1] - last[1]) - 0.01) < 1e-4);

  AdamState scaled(2, 0.1);
  Vec r = Vec::Zero(2);
  Vec sc(2);
  sc << 1.0, 0.5;
  adam_step(scaled, r, Vec::Ones(2), sc);
  CHECK(r[1] == doctest::Approx(0.5 * r[0]));

  AdamState bad(2, 0.1);
  Vec w = Vec::Zero(2);
  CHECK_THROWS_AS(adam_step(bad, w, Vec::Zero(3)), ValidationError);
  CHECK_THROWS_AS(adam_step(bad, w, Vec::Constant(2, std::nan(""))), ValidationError);
  CHECK_THROWS_AS(adam_step(bad, w, Vec::Ones(2), Vec::Ones(3)), ValidationError);
}
