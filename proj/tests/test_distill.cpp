#include "dreamsampler/distill.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace dreamsampler;

namespace {

GmmPrior standard_normal(int d) {
  return GmmPrior({1.0}, {Vec::Zero(d)}, {Mat::Identity(d, d)});
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

Vec tweedie_of(const EpsilonModel& m, const Vec& z, int t, Condition c, const NoiseSchedule& s) {
  return tweedie(z, s.alpha_bar(t), m.predict(z, t, c));
}

// Four isotropic classes at the corners (+-2, +-2); class index bit 0 = sign of x, bit 1 = sign of y.
GmmPrior corners() {
  std::vector<Vec> means;
  for (int k = 0; k < 4; ++k) means.push_back(vec2(k & 1 ? 2.0 : -2.0, k & 2 ? 2.0 : -2.0));
  return GmmPrior::isotropic(means, 0.3);
}

}  // namespace

TEST_CASE("score-distillation gradient") {
  const NoiseSchedule s = make_schedule(1000);
  const Vec e = vec2(0.3, -0.7);
  const FunctionEpsilonModel fixed(2, [e](const Vec&, int, Condition) { return e; });
  const IdentityGenerator id(2);
  const LatentTarget target{&id, nullptr};
  CHECK(sds_gradient(target, vec2(1, 2), fixed, Condition::null(), 500, e, 1.0, s).norm() == 0.0);
  const Vec tilde = vec2(1.0, 1.0);
  CHECK(sds_gradient(target, vec2(1, 2), fixed, Condition::null(), 500, tilde, 1.0, s) == e - tilde);

  // Through a blob generator and an encoder: pullback equals d/dpsi of r . E g(psi) for fixed r.
  const BlobGenerator blobs(8, 8, 2);
  const LinearAutoencoder ae = make_linear_autoencoder(64, 6, 3);
  const LatentTarget deep{&blobs, &ae};
  Rng rng(10);
  const Vec psi = random_blob_scene(8, 8, 2, 1.5, 0.2, rng).to_params();
  const GmmEpsilonModel m(standard_normal(6), s);
  const Vec et = rng.normal_vec(6);
  const Vec g = sds_gradient(deep, psi, m, Condition::null(), 300, et, 1.0, s);
  const Vec zt = forward_noise(deep.latent(psi), s.alpha_bar(300), et);
  const Vec r = m.predict(zt, 300, Condition::null()) - et;
  for (Eigen::Index j = 0; j < psi.size(); ++j) {
    Vec p = psi, q = psi;
    p[j] += 1e-6;
    q[j] -= 1e-6;
    const double fd = r.dot(deep.latent(p) - deep.latent(q)) / 2e-6;
    CHECK(g[j] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("zero iterations return the initialization") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const IdentityGenerator id(2);
  DistillConfig cfg;
  cfg.iterations = 0;
  Rng rng(1);
  const Vec psi0 = vec2(0.4, -0.1);
  CHECK(score_distillation_loop({&id, nullptr}, psi0, m, Condition::null(), s, cfg, rng).psi == psi0);
  CHECK(dreamsampler_distill_loop({&id, nullptr}, psi0, m, Condition::null(), {}, s, cfg, rng).psi == psi0);
  cfg.iterations = 1001;
  CHECK_THROWS_AS(dreamsampler_distill_loop({&id, nullptr}, psi0, m, Condition::null(), {}, s, cfg, rng),
                  ValidationError);
}

TEST_CASE("score distillation contracts towards a standard normal prior") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(standard_normal(2), s);
  const IdentityGenerator id(2);
  DistillConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.01;
  cfg.iterations = 2000;
  Rng rng(5);
  const DistillResult r = score_distillation_loop({&id, nullptr}, vec2(10, 10), m, Condition::null(), s, cfg, rng, true);
  CHECK(r.psi.norm() < 1.0);
  CHECK(r.z_trace.size() == 2000);
  CHECK(std::all_of(r.t_trace.begin(), r.t_trace.end(), [](int t) { return t >= 1 && t <= 1000; }));
}

TEST_CASE("distillation reports divergence") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const IdentityGenerator id(2);
  DistillConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 1e9;
  Rng rng(2);
  CHECK_THROWS_AS(score_distillation_loop({&id, nullptr}, vec2(0.1, 0), m, Condition::null(), s, cfg, rng),
                  ConvergenceError);
  CHECK_THROWS_AS(dreamsampler_distill_loop({&id, nullptr}, vec2(0.1, 0), m, Condition::null(), {}, s, cfg, rng),
                  ConvergenceError);
}

TEST_CASE("exact-step distillation on the identity generator follows DDIM") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const IdentityGenerator id(2);
  DistillConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.exact_step = true;
  cfg.eta = 0.0;
  cfg.iterations = 50;
  cfg.omega = 1.0;
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const DistillResult r =
        dreamsampler_distill_loop({&id, nullptr}, vec2(-0.5, 0.2), m, Condition::of_class(1), {}, s, cfg, rng, true);
    REQUIRE(r.z_trace.size() == 50);
    const TimestepPlan plan = plan_timesteps(s, 50, Direction::Reverse);
    std::vector<Vec> trace;
    Rng unused(99);
    const LatentState end =
        sample_reverse({r.z_trace[0], plan.steps[0], std::nullopt}, m, Condition::of_class(1), plan, s, {}, unused, &trace);
    for (std::size_t i = 0; i + 1 < r.z_trace.size(); ++i) {
      CHECK((r.z_trace[i + 1] - trace[i]).norm() < 1e-9 * (1.0 + trace[i].norm()));
    }
    // The final update lands on the clean DDIM output.
    CHECK((r.psi - end.z).norm() < 1e-9);
  }
}

TEST_CASE("a data-consistency regularizer pulls the generator output to its anchor") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const IdentityGenerator id(2);
  const Vec anchor = vec2(1.0, 1.0);
  const QuadraticAnchor dc(anchor);
  DistillConfig cfg;
  double free_dist = 0.0, reg_dist = 0.0;
  for (int seed = 0; seed < 10; ++seed) {
    Rng a(seed), b(seed);
    free_dist += (dreamsampler_distill_loop({&id, nullptr}, vec2(-0.5, 0), m, Condition::null(), {}, s, cfg, a).psi -
                  anchor).norm();
    reg_dist += (dreamsampler_distill_loop({&id, nullptr}, vec2(-0.5, 0), m, Condition::null(), {{50.0, &dc}}, s,
                                           cfg, b).psi -
                 anchor).norm();
  }
  CHECK(reg_dist * 10.0 <= free_dist);
}

TEST_CASE("guided posterior mean endpoints") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const Vec z = 2.0 * rng.normal_vec(2);
    const int t = rng.uniform_int(1, 1000);
    const Condition c = Condition::of_class(i % 2);
    CHECK((dds_closed_form(z, t, m, c, 0.0, s) - tweedie_of(m, z, t, Condition::null(), s)).norm() < 1e-12);
    CHECK((dds_closed_form(z, t, m, c, 1.0, s) - tweedie_of(m, z, t, c, s)).norm() < 1e-12);
    const double g = rng.uniform();
    CHECK((dds_closed_form(z, t, m, c, g, s) - dds_cfg_tweedie(z, t, m, c, g, s)).norm() <
          1e-9 * (1.0 + dds_closed_form(z, t, m, c, g, s).norm()));
  }
  CHECK_THROWS_AS(dds_closed_form(vec2(0, 0), 10, m, Condition::of_class(0), 1.5, s), ValidationError);
  CHECK_THROWS_AS(dds_cfg_tweedie(vec2(0, 0), 10, m, Condition::of_class(0), -0.1, s), ValidationError);
}

TEST_CASE("localized posterior mean") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(corners(), s);
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const Vec z = 2.0 * rng.normal_vec(2);
    const int t = rng.uniform_int(1, 1000);
    const double g = rng.uniform();
    const Condition c = Condition::of_class(rng.uniform_int(0, 3));
    const MaskedCondition all{{{Vec::Ones(2), c}}};
    const MaskedCondition none{{{Vec::Zero(2), c}}};
    CHECK((localized_tweedie(z, t, m, all, g, s) - dds_cfg_tweedie(z, t, m, c, g, s)).norm() < 1e-12);
    CHECK((localized_tweedie(z, t, m, none, g, s) - tweedie_of(m, z, t, Condition::null(), s)).norm() < 1e-12);
    CHECK((localized_tweedie(z, t, m, MaskedCondition{}, g, s) - tweedie_of(m, z, t, Condition::null(), s)).norm() <
          1e-12);

    const Condition c2 = Condition::of_class(rng.uniform_int(0, 3));
    const MaskedCondition halves{{{vec2(1, 0), c}, {vec2(0, 1), c2}}};
    const Vec h = localized_tweedie(z, t, m, halves, g, s);
    CHECK(h[0] == doctest::Approx(dds_cfg_tweedie(z, t, m, c, g, s)[0]).epsilon(1e-12));
    CHECK(h[1] == doctest::Approx(dds_cfg_tweedie(z, t, m, c2, g, s)[1]).epsilon(1e-12));
  }
}

TEST_CASE("localized posterior mean is permutation equivariant") {
  const NoiseSchedule s = make_schedule(1000);
  // Coordinatewise model: class k shifts every coordinate by k.
  const FunctionEpsilonModel m(5, [](const Vec& z, int, Condition c) {
    return (z.array().tanh() + (c.is_null() ? 0.0 : static_cast<double>(c.cls + 1))).matrix().eval();
  });
  Rng rng(8);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
  perm.indices() << 3, 0, 4, 1, 2;
  Vec m0(5), m1(5);
  m0 << 1, 0, 0, 1, 0;
  m1 << 0, 1, 0, 0, 0;
  const MaskedCondition mc{{{m0, Condition::of_class(0)}, {m1, Condition::of_class(2)}}};
  const MaskedCondition pmc{{{perm * m0, Condition::of_class(0)}, {perm * m1, Condition::of_class(2)}}};
  for (int i = 0; i < 10; ++i) {
    const Vec z = rng.normal_vec(5);
    const int t = rng.uniform_int(1, 1000);
    const Vec a = perm * localized_tweedie(z, t, m, mc, 0.4, s);
    const Vec b = localized_tweedie(perm * z, t, m, pmc, 0.4, s);
    CHECK((a - b).norm() < 1e-12);
  }
}

TEST_CASE("masked condition validation") {
  const MaskedCondition ok{{{vec2(1, 0), Condition::of_class(0)}, {vec2(0, 1), Condition::of_class(1)}}};
  const MaskedCondition overlap{{{vec2(1, 1), Condition::of_class(0)}, {vec2(0, 1), Condition::of_class(1)}}};
  const MaskedCondition fractional{{{vec2(0.5, 0), Condition::of_class(0)}}};
  const MaskedCondition wrong_size{{{Vec::Ones(3), Condition::of_class(0)}}};
  CHECK_NOTHROW(ok.validate(2));
  CHECK_THROWS_AS(overlap.validate(2), ValidationError);
  CHECK_THROWS_AS(fractional.validate(2), ValidationError);
  CHECK_THROWS_AS(wrong_size.validate(2), ValidationError);
}

TEST_CASE("editing") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmPrior prior = GmmPrior::default_toy();
  const GmmEpsilonModel m(prior, s);
  const int n = 100;
  std::vector<Vec> sources;
  for (int i = 0; i < n; ++i) {
    Rng r = Rng::stream(3, "source", i);
    sources.push_back(prior.mean(0) + 0.3 * r.normal_vec(2));
  }

  SUBCASE("zero guidance reconstructs the source") {
    EditConfig cfg;
    cfg.guidance.c = 0.0;
    double err = 0.0;
    for (int i = 0; i < n; ++i) {
      Rng rng(i);
      err += (edit(sources[i], m, Condition::of_class(1), s, cfg, rng) - sources[i]).norm() / sources[i].norm();
    }
    CHECK(err / n < 1e-2);
  }

  SUBCASE("default guidance moves sources to the target class") {
    EditConfig cfg;
    int flipped = 0;
    for (int i = 0; i < n; ++i) {
      Rng rng(i);
      std::vector<Vec> trace;
      const Vec out = edit(sources[i], m, Condition::of_class(1), s, cfg, rng, &trace);
      CHECK(trace.size() == 200);
      flipped += prior.nearest_mean(out) == 1;
    }
    CHECK(flipped >= 90);
  }

  SUBCASE("distance to the target decreases with guidance") {
    EditConfig cfg;
    cfg.nfe = 100;
    double prev = std::numeric_limits<double>::infinity();
    for (double c : {0.0, 0.05, 0.1, 0.15}) {
      cfg.guidance.c = c;
      double dist = 0.0;
      for (int i = 0; i < 50; ++i) {
        Rng rng(i);
        dist += (edit(sources[i], m, Condition::of_class(1), s, cfg, rng) - prior.mean(1)).norm();
      }
      CHECK(dist < prev);
      prev = dist;
    }
  }

  SUBCASE("renoising variants") {
    EditConfig cfg;
    cfg.nfe = 50;
    cfg.renoise = RenoiseSource::Previous;
    Rng a(1), b(1);
    const Vec x = edit(sources[0], m, Condition::of_class(1), s, cfg, a);
    cfg.eps_seed = EpsSeed::Random;
    const Vec y = edit(sources[0], m, Condition::of_class(1), s, cfg, b);
    CHECK(x.allFinite());
    CHECK(y.allFinite());
    CHECK(x != y);
    cfg.guidance.c = 1.5;
    CHECK_THROWS_AS(edit(sources[0], m, Condition::of_class(1), s, cfg, a), ValidationError);
  }
}

TEST_CASE("masked editing changes only the masked coordinate's class") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmPrior prior = corners();
  const GmmEpsilonModel m(prior, s);
  EditConfig cfg;
  cfg.nfe = 100;
  // Source in class 0 (-2, -2); guide x towards class 1 (+2, -2), leave y null-conditioned.
  const MaskedCondition mc{{{vec2(1, 0), Condition::of_class(1)}}};
  int hits = 0;
  for (int i = 0; i < 50; ++i) {
    Rng r = Rng::stream(5, "corner-source", i);
    const Vec src = prior.mean(0) + 0.3 * r.normal_vec(2);
    Rng rng(i);
    const Vec out = edit(src, m, mc, s, cfg, rng);
    hits += out[0] > 0.0 && out[1] < 0.0;
  }
  CHECK(hits >= 45);
  const MaskedCondition overlap{{{vec2(1, 0), Condition::of_class(1)}, {vec2(1, 1), Condition::of_class(2)}}};
  Rng rng(0);
  CHECK_THROWS_AS(edit(prior.mean(0), m, overlap, s, cfg, rng), ValidationError);
}

TEST_CASE("reverse-plan distillation splits more evenly between two modes") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmPrior prior = GmmPrior::default_toy();
  const GmmEpsilonModel m(prior, s);
  const IdentityGenerator id(2);
  const DistillConfig cfg;
  const int n = 64;
  int sds_b = 0, ds_b = 0;
  for (int i = 0; i < n; ++i) {
    Rng a = Rng::stream(17, "balance-sds", i), b = Rng::stream(17, "balance-ds", i);
    sds_b += prior.nearest_mean(score_distillation_loop({&id, nullptr}, vec2(-0.5, 0), m, Condition::null(), s, cfg, a).psi) == 1;
    ds_b += prior.nearest_mean(dreamsampler_distill_loop({&id, nullptr}, vec2(-0.5, 0), m, Condition::null(), {}, s, cfg, b).psi) == 1;
  }
  MESSAGE("mode B share: score distillation " << sds_b << "/" << n << ", reverse plan " << ds_b << "/" << n);
  const auto minority = [n](int k) { return std::min(k, n - k); };
  CHECK(minority(ds_b) > minority(sds_b));
}
