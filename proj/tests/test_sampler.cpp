#include "dreamsampler/sampler.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

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

}  // namespace

TEST_CASE("tweedie and forward noise") {
  Vec z(1), e(1);
  z << 2.0;
  e << 1.0;
  CHECK(tweedie(z, 0.25, e)[0] == doctest::Approx((2.0 - std::sqrt(0.75)) / 0.5).epsilon(1e-15));
  CHECK(tweedie(z, 1.0, e)[0] == 2.0);
  CHECK(forward_noise(z, 0.25, e)[0] == doctest::Approx(0.5 * 2.0 + std::sqrt(0.75)).epsilon(1e-15));
  CHECK_THROWS_AS(tweedie(z, 0.0, e), ValidationError);
  CHECK_THROWS_AS(tweedie(z, 0.5, Vec::Zero(2)), ValidationError);

  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const Vec z0 = rng.normal_vec(3), eps = rng.normal_vec(3);
    const double ab = rng.uniform(0.01, 1.0);
    CHECK((tweedie(forward_noise(z0, ab, eps), ab, eps) - z0).norm() < 1e-12 * (1.0 + z0.norm()) / std::sqrt(ab));
  }
}

TEST_CASE("renoising direction") {
  const Vec a = vec2(1.0, -2.0), b = vec2(0.5, 3.0);
  CHECK(ddim_noise(a, b, 0.0, 0.4) == a);
  const Vec full = ddim_noise(a, b, std::sqrt(0.6), 0.4);
  CHECK((full - b).norm() < 1e-15);
  const Vec half = ddim_noise(a, b, 0.5, 0.4);
  const Vec want = (std::sqrt(0.6 - 0.25) * a + 0.5 * b) / std::sqrt(0.6);
  CHECK((half - want).norm() < 1e-15);
  CHECK(ddim_noise(a, b, 0.0, 1.0) == a);
  CHECK_THROWS_AS(ddim_noise(a, b, 0.1, 1.0), ValidationError);
  CHECK_THROWS_AS(ddim_noise(a, b, 0.8, 0.4), ValidationError);
  CHECK_THROWS_AS(ddim_noise(a, b, -0.1, 0.4), ValidationError);

  const Vec zb = vec2(0.3, 0.7);
  CHECK(renoise(zb, a, b, 0.0, 1.0) == zb);
  const Vec r = renoise(zb, a, b, 0.5, 0.4);
  CHECK((r - (std::sqrt(0.4) * zb + std::sqrt(0.6) * half)).norm() < 1e-14);
}

TEST_CASE("DDIM step with a zero noise prediction rescales the latent") {
  const NoiseSchedule s = make_schedule(1000);
  const FunctionEpsilonModel zero(2, [](const Vec&, int, Condition) { return Vec::Zero(2).eval(); });
  Rng rng(4);
  SamplerConfig cfg;
  for (int i = 0; i < 20; ++i) {
    const int t = rng.uniform_int(2, 1000);
    const int tp = rng.uniform_int(0, t - 1);
    const Vec z = rng.normal_vec(2);
    const LatentState out = ddim_step({z, t, std::nullopt}, tp, zero, Condition::null(), s, cfg, rng);
    CHECK(out.t == tp);
    CHECK((out.z - std::sqrt(s.alpha_bar(tp) / s.alpha_bar(t)) * z).norm() < 1e-13 * z.norm() / std::sqrt(s.alpha_bar(t)));
  }
}

TEST_CASE("deterministic DDIM on a standard normal prior") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(standard_normal(2), s);
  const TimestepPlan plan = plan_timesteps(s, 50, Direction::Reverse);
  Rng rng(8);
  const Vec z = rng.normal_vec(2);
  std::vector<Vec> trace;
  const LatentState out = sample_reverse({z, plan.steps[0], std::nullopt}, m, Condition::null(), plan, s, {}, rng, &trace);
  REQUIRE(trace.size() == plan.size());
  CHECK(out.t == 0);
  double f = 1.0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double at = s.alpha_bar(plan.steps[i]), ap = s.alpha_bar(plan.prev(i));
    f *= std::sqrt(ap) * std::sqrt(at) + std::sqrt(1.0 - ap) * std::sqrt(1.0 - at);
    CHECK((trace[i] - f * z).norm() < 1e-12);
  }
}

TEST_CASE("ddim_step draws exactly one vector") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  Rng a(5), b(5);
  SamplerConfig cfg;
  cfg.eta = 1.0;
  ddim_step({vec2(0.1, 0.2), 500, std::nullopt}, 495, m, Condition::null(), s, cfg, a);
  b.normal_vec(2);
  CHECK(a.normal() == b.normal());
}

TEST_CASE("DDIM inversion") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(standard_normal(2), s);
  const Vec z0 = vec2(0.7, -1.1);

  const TimestepPlan one = plan_timesteps(s, 1, Direction::Forward);
  REQUIRE(one.size() == 1);
  const LatentState a = ddim_invert(z0, m, Condition::null(), one, s);
  const double ab = s.alpha_bar(one.steps[0]);
  // From t = 0 the Tweedie estimate is the input itself.
  CHECK((a.z - (std::sqrt(ab) + (1.0 - ab)) * z0).norm() < 1e-14);

  const TimestepPlan plan = plan_timesteps(s, 20, Direction::Forward);
  const LatentState b = ddim_invert(z0, m, Condition::null(), plan, s);
  double f = 1.0;
  int from = 0;
  for (int to : plan.steps) {
    const double af = s.alpha_bar(from), at = s.alpha_bar(to);
    f *= (1.0 - std::sqrt(1.0 - af) * std::sqrt(1.0 - at)) * std::sqrt(at) / std::sqrt(af) + (1.0 - at);
    from = to;
  }
  CHECK(b.t == plan.steps.back());
  CHECK((b.z - f * z0).norm() < 1e-12);
  CHECK(b.eps_prev.has_value());
  CHECK_THROWS_AS(ddim_invert(z0, m, Condition::null(), plan_timesteps(s, 5, Direction::Reverse), s), ValidationError);
}

TEST_CASE("latent optimization closed forms") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Vec zh = rng.normal_vec(4), a = rng.normal_vec(4);
    const double gamma = rng.uniform(0.0, 0.99);
    const QuadraticAnchor anchor(a);
    const Vec z = solve_latent_opt(zh, {{gamma / (1.0 - gamma), &anchor}});
    CHECK((z - ((1.0 - gamma) * zh + gamma * a)).norm() < 1e-13);
  }
  const Vec zh = vec2(1.0, 2.0), a = vec2(-3.0, 5.0);
  const QuadraticAnchor anchor(a);
  CHECK(solve_latent_opt(zh, {}) == zh);
  CHECK(solve_latent_opt(zh, {{0.0, &anchor}}) == zh);
  CHECK(solve_latent_opt(zh, {{std::numeric_limits<double>::infinity(), &anchor}}) == a);

  const MaskedQuadraticAnchor masked(vec2(1.0, 0.0), a);
  const Vec pinned = solve_latent_opt(zh, {{std::numeric_limits<double>::infinity(), &masked}});
  CHECK(pinned[0] == -3.0);
  CHECK(pinned[1] == 2.0);
  const Vec soft = solve_latent_opt(zh, {{1.0, &masked}});
  CHECK(soft[0] == doctest::Approx(-1.0));
  CHECK(soft[1] == 2.0);

  const LinearRegularizer lin(vec2(2.0, -4.0));
  const Vec l = solve_latent_opt(zh, {{0.5, &lin}});
  CHECK(l[0] == doctest::Approx(0.5));
  CHECK(l[1] == doctest::Approx(3.0));

  CHECK_THROWS_AS(solve_latent_opt(zh, {{-1.0, &anchor}}), ValidationError);
  CHECK_THROWS_AS(solve_latent_opt(zh, {{1.0, nullptr}}), ValidationError);
  CHECK_THROWS_AS(MaskedQuadraticAnchor(vec2(0.5, 1.0), a), ValidationError);
}

TEST_CASE("latent optimization by gradient descent matches a grid search") {
  Rng rng(12);
  SamplerConfig cfg;
  cfg.opt_tol = 1e-11;
  cfg.opt_max_iter = 5000;
  for (int i = 0; i < 10; ++i) {
    Vec zh(1), a(1), v(1);
    zh << rng.uniform(-2, 2);
    a << rng.uniform(-2, 2);
    v << rng.uniform(-2, 2);
    const double w1 = rng.uniform(0.1, 2.0), w2 = rng.uniform(0.1, 2.0);
    const QuadraticAnchor q(a);
    const LinearRegularizer lin(v);
    const Vec z = solve_latent_opt(zh, {{w1, &q}, {w2, &lin}}, cfg);

    const auto objective = [&](double x) {
      return (x - zh[0]) * (x - zh[0]) + w1 * (x - a[0]) * (x - a[0]) + w2 * v[0] * x;
    };
    double best = -10.0, lo = -10.0, hi = 10.0;
    for (int round = 0; round < 4; ++round) {
      const int n = 20000;
      double bv = std::numeric_limits<double>::infinity();
      for (int k = 0; k <= n; ++k) {
        const double x = lo + (hi - lo) * k / n;
        if (objective(x) < bv) {
          bv = objective(x);
          best = x;
        }
      }
      const double h = (hi - lo) / n;
      lo = best - 2 * h;
      hi = best + 2 * h;
    }
    CHECK(std::abs(z[0] - best) < 1e-6);  // a flat minimum limits the grid to ~sqrt(eps)
    const double g = 2 * (z[0] - zh[0]) + 2 * w1 * (z[0] - a[0]) + w2 * v[0];
    CHECK(std::abs(g) < 1e-10);
  }
}

TEST_CASE("latent optimization reports non-convergence") {
  const Vec zh = vec2(1.0, 2.0);
  const QuadraticAnchor q(vec2(0.0, 0.0));
  const LinearRegularizer lin(vec2(1.0, 1.0));
  SamplerConfig cfg;
  cfg.opt_max_iter = 1;
  CHECK_THROWS_AS(solve_latent_opt(zh, {{1.0, &q}, {1.0, &lin}}, cfg), ConvergenceError);
  cfg.opt_max_iter = 500;
  cfg.opt_step = 10.0;
  CHECK_THROWS_AS(solve_latent_opt(zh, {{1.0, &q}, {1.0, &lin}}, cfg), ConvergenceError);
  CHECK_THROWS_AS(solve_latent_opt(zh, {{std::numeric_limits<double>::infinity(), &lin}, {1.0, &q}}),
                  ValidationError);
}

TEST_CASE("regularizer gradients match finite differences") {
  Rng rng(6);
  const Vec a = rng.normal_vec(3), v = rng.normal_vec(3);
  Vec mask(3);
  mask << 1.0, 0.0, 1.0;
  const QuadraticAnchor q(a);
  const MaskedQuadraticAnchor mq(mask, a);
  const LinearRegularizer lin(v);
  for (const Regularizer* r : {static_cast<const Regularizer*>(&q), static_cast<const Regularizer*>(&mq),
                               static_cast<const Regularizer*>(&lin)}) {
    for (int i = 0; i < 10; ++i) {
      const Vec z = rng.normal_vec(3);
      Vec fd(3);
      for (int j = 0; j < 3; ++j) {
        Vec p = z, m = z;
        p[j] += 1e-6;
        m[j] -= 1e-6;
        fd[j] = (r->value(p) - r->value(m)) / 2e-6;
      }
      CHECK((fd - r->gradient(z)).norm() < 1e-6);
    }
  }
}

TEST_CASE("regularized step without regularizers equals the DDIM step") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  SamplerConfig cfg;
  cfg.eta = 1.0;
  Rng a(2), b(2);
  const LatentState st{vec2(0.3, -0.4), 600, std::nullopt};
  const LatentState x = ddim_step(st, 580, m, Condition::of_class(1), s, cfg, a);
  const LatentState y = dreamsampler_step(st, 580, m, Condition::of_class(1), {}, s, cfg, b);
  CHECK(x.z == y.z);
  CHECK(*x.eps_prev == *y.eps_prev);
}

TEST_CASE("a mild zero anchor shrinks sample norms") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const TimestepPlan plan = plan_timesteps(s, 50, Direction::Reverse);
  const QuadraticAnchor zero(Vec::Zero(2));
  SamplerConfig cfg;
  cfg.eta = 1.0;
  double plain = 0.0, anchored = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    Rng init = Rng::stream(77, "anchor-init", i);
    const Vec z = init.normal_vec(2);
    Rng ra = Rng::stream(77, "anchor-run", i), rb = Rng::stream(77, "anchor-run", i);
    LatentState a{z, plan.steps[0], std::nullopt}, b = a;
    for (std::size_t k = 0; k < plan.size(); ++k) {
      a = ddim_step(a, plan.prev(k), m, Condition::null(), s, cfg, ra);
      b = dreamsampler_step(b, plan.prev(k), m, Condition::null(), {{0.05, &zero}}, s, cfg, rb);
    }
    plain += a.z.norm();
    anchored += b.z.norm();
  }
  CHECK(anchored / n < plain / n);
}

TEST_CASE("sample_reverse validates its plan") {
  const NoiseSchedule s = make_schedule(1000);
  const GmmEpsilonModel m(GmmPrior::default_toy(), s);
  const TimestepPlan plan = plan_timesteps(s, 10, Direction::Reverse);
  Rng rng(1);
  CHECK_THROWS_AS(sample_reverse({vec2(0, 0), plan.steps[0] - 1, std::nullopt}, m, Condition::null(), plan, s, {}, rng),
                  ValidationError);
  CHECK_THROWS_AS(sample_reverse({vec2(0, 0), 1000, std::nullopt}, m, Condition::null(),
                                 plan_timesteps(s, 10, Direction::Forward), s, {}, rng),
                  ValidationError);
  CHECK_THROWS_AS(ddim_step({Vec::Zero(3), 10, std::nullopt}, 5, m, Condition::null(), s, {}, rng), ValidationError);
}
