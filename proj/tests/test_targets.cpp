#include <doctest.h>

#include <cmath>

#include "nfbench/targets.hpp"

using namespace nfbench;
using namespace nfbench::targets;

namespace {

// Max relative error between the analytic gradient and central differences.
Real fd_gradient_error(const TargetDistribution& t, const Vec& x, Real step = 1e-5) {
  Vec g = grad_log_density(t, x);
  Real worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec hi = x, lo = x;
    hi(i) += step;
    lo(i) -= step;
    Real fd = (log_density(t, hi) - log_density(t, lo)) / (2.0 * step);
    Real denom = std::max({1.0, std::fabs(fd), std::fabs(g(i))});
    worst = std::max(worst, std::fabs(fd - g(i)) / denom);
  }
  return worst;
}

// Max abs difference between the analytic gradient and the tape gradient.
Real tape_gradient_error(const TargetDistribution& t, const Vec& x) {
  diff::Tape tape;
  diff::Var xv = tape.input(x);
  diff::Var lp = t.tape_log_density(tape, xv);
  tape.set_output(lp);
  REQUIRE(lp.scalar() == doctest::Approx(log_density(t, x)).epsilon(1e-10));
  Vec g = tape.gradient({x});
  return (g - grad_log_density(t, x)).lpNorm<Eigen::Infinity>();
}

void check_gradients_everywhere(const TargetDistribution& t, int points,
                                std::uint64_t seed, Real scale = 1.0) {
  RandomStream rng(seed);
  for (int rep = 0; rep < points; ++rep) {
    Vec x = rng.normal_vector(t.dimension) * scale;
    CAPTURE(t.name);
    CAPTURE(rep);
    CHECK(fd_gradient_error(t, x) < 1e-5);
    CHECK(tape_gradient_error(t, x) < 1e-8);
  }
}

PosteriorDataset classic_eight_schools() {
  PosteriorDataset data;
  data.name = "eight_schools";
  Vec y(8), sigma(8);
  y << 28, 8, -3, 7, -1, 1, 18, 12;
  sigma << 15, 10, 16, 11, 9, 11, 10, 18;
  data.columns["y"] = y;
  data.columns["sigma"] = sigma;
  return data;
}

PosteriorDataset synthetic_german_credit(int rows, std::uint64_t seed) {
  RandomStream rng(seed);
  PosteriorDataset data;
  data.name = "german_credit";
  data.matrices["x"] = rng.normal_matrix(rows, 25);
  Vec y(rows);
  for (int i = 0; i < rows; ++i) y(i) = rng.uniform01() < 0.4 ? 0.0 : 1.0;
  data.columns["y"] = y;
  return data;
}

}  // namespace

TEST_CASE("gaussian targets: values and moments") {
  auto std100 = standard_gaussian(100);
  CHECK(log_density(std100, Vec::Zero(100)) == doctest::Approx(-50.0 * kLog2Pi));
  CHECK(reference_moments(std100).second_moment.isApproxToConstant(1.0));

  Vec stds = Vec::LinSpaced(10, 1.0, 10.0);
  auto diag = diagonal_gaussian(10, stds);
  CHECK((reference_moments(diag).second_moment - stds.array().square().matrix())
            .lpNorm<Eigen::Infinity>() < 1e-12);

  // grad of standard gaussian is -x
  RandomStream rng(2);
  Vec x = rng.normal_vector(100);
  CHECK((grad_log_density(std100, x) + x).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("gaussian log density differences match the quadratic form") {
  GaussianSpec spec;
  spec.dimension = 20;
  spec.kind = GaussianKind::kFullRank;
  spec.eigenvalues = Vec::LinSpaced(20, 1.0, 10.0);
  spec.rotation_seed = 5;
  auto t = gaussian(spec);
  Mat q = random_rotation(20, 5);
  Mat prec = q * spec.eigenvalues.cwiseInverse().asDiagonal() * q.transpose();
  RandomStream rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Vec a = rng.normal_vector(20), b = rng.normal_vector(20);
    Real lhs = log_density(t, a) - log_density(t, b);
    Real rhs = -0.5 * (a.dot(prec * a) - b.dot(prec * b));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-8));
  }
}

TEST_CASE("random_rotation: orthonormal, det 1, reproducible") {
  for (int dim : {3, 17, 100}) {
    Mat q = random_rotation(dim, 42);
    CHECK((q * q.transpose() - Mat::Identity(dim, dim)).lpNorm<Eigen::Infinity>() <
          1e-10);
    CHECK(q.determinant() == doctest::Approx(1.0).epsilon(1e-8));
    Mat q2 = random_rotation(dim, 42);
    CHECK((q - q2).lpNorm<Eigen::Infinity>() == 0.0);
    Mat q3 = random_rotation(dim, 43);
    CHECK((q - q3).lpNorm<Eigen::Infinity>() > 1e-3);
  }
}

TEST_CASE("ill-conditioned gaussian has condition number above 1e3 at dim 100") {
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    auto spec = ill_conditioned_spec(100, seed);
    Real cond = spec.eigenvalues.maxCoeff() / spec.eigenvalues.minCoeff();
    CHECK(cond > 1e3);
  }
  auto t = ill_conditioned_gaussian(100, 11);
  auto m = reference_moments(t);
  CHECK(m.second_moment.minCoeff() > 0.0);
  RandomStream rng(1);
  Vec x = rng.normal_vector(100);
  CHECK(std::isfinite(log_density(t, x)));
  CHECK(fd_gradient_error(t, x) < 1e-5);
}

TEST_CASE("funnel: conditional structure and moments") {
  auto t = funnel(100);
  // First coordinate N(0, 3): density at (x1, 0...) differences only from x1
  // and the conditional normalizer term.
  Vec a = Vec::Zero(100), b = Vec::Zero(100);
  a(0) = 1.0;
  Real lhs = log_density(t, a) - log_density(t, b);
  Real rhs = -0.5 * 1.0 / 9.0 - 0.5 * 99.0 * 1.0;  // x1^2/(2*9) and (d-1)*x1/2
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  auto m = reference_moments(t);
  CHECK(m.second_moment(0) == doctest::Approx(9.0));
  CHECK(m.second_moment(1) == doctest::Approx(std::exp(4.5)));
  check_gradients_everywhere(funnel(20), 100, 77);
}

TEST_CASE("rosenbrock: mode, errors, moments oracle") {
  auto t = rosenbrock(100, 10.0);
  CHECK(log_density(t, Vec::Ones(100)) == doctest::Approx(0.0));
  CHECK_THROWS_AS(rosenbrock(7, 10.0), SpecError);

  // Independent quadrature oracle for the pair moments.
  auto w = [](Real x) { return std::exp(-(x - 1.0) * (x - 1.0)); };
  Real z = integrate(w, -7.0, 9.0, 1e-13);
  Real m2 = integrate([&](Real x) { return x * x * w(x); }, -7.0, 9.0, 1e-13) / z;
  Real m4 = integrate([&](Real x) { return x * x * x * x * w(x); }, -7.0, 9.0, 1e-13) / z;
  auto m = reference_moments(t);
  CHECK(m.second_moment(0) == doctest::Approx(m2).epsilon(1e-9));
  CHECK(m.second_moment(1) == doctest::Approx(m4 + 0.05).epsilon(1e-9));
  check_gradients_everywhere(rosenbrock(10, 10.0), 100, 13);
}

TEST_CASE("double well: mode value, gradient zero, quadrature moments") {
  auto t = double_well(10);
  CHECK(log_density(t, Vec::Constant(10, 2.0)) == doctest::Approx(0.0));
  CHECK(grad_log_density(t, Vec::Constant(10, 2.0)).lpNorm<Eigen::Infinity>() ==
        0.0);

  // Independent oracle: composite trapezoid on a fine fixed grid.
  auto w = [](Real x) {
    Real q = x * x - 4.0;
    return std::exp(-q * q);
  };
  const int n = 2'000'000;
  Real a = -6.0, b = 6.0, h = (b - a) / n;
  Real z = 0.0, m2 = 0.0;
  for (int i = 0; i <= n; ++i) {
    Real x = a + i * h;
    Real f = w(x) * ((i == 0 || i == n) ? 0.5 : 1.0);
    z += f;
    m2 += x * x * f;
  }
  CHECK(double_well_second_moment() == doctest::Approx(m2 / z).epsilon(1e-9));
  check_gradients_everywhere(double_well(10), 100, 21, 2.5);
}

TEST_CASE("mixtures: weights, moments, log-sum-exp robustness") {
  auto t3 = mixture3(100);
  auto m = reference_moments(t3);
  CHECK(m.second_moment(0) == doctest::Approx(50.0 / 3.0 + 0.49).epsilon(1e-12));
  CHECK(m.variance(0) == doctest::Approx(50.0 / 3.0 + 0.49).epsilon(1e-12));

  // Never -inf for finite inputs, even far from all components.
  Vec far = Vec::Constant(100, 40.0);
  CHECK(std::isfinite(log_density(t3, far)));

  MixtureSpec bad;
  bad.component_means = Mat::Zero(2, 3);
  bad.component_stds = Vec::Ones(2);
  bad.weights = Vec::Constant(2, 0.7);
  CHECK_THROWS_AS(gaussian_mixture(bad, "bad"), SpecError);

  check_gradients_everywhere(mixture3(5), 100, 31, 4.0);
  check_gradients_everywhere(mixture20(5, 9), 50, 33, 4.0);
}

TEST_CASE("synthetic gradients match finite differences at dimension 100") {
  check_gradients_everywhere(standard_gaussian(100), 5, 41);
  check_gradients_everywhere(
      diagonal_gaussian(100, Vec::LinSpaced(100, 1.0, 10.0)), 5, 42);
  GaussianSpec spec;
  spec.dimension = 100;
  spec.kind = GaussianKind::kFullRank;
  spec.eigenvalues = Vec::LinSpaced(100, 1.0, 10.0);
  spec.rotation_seed = 3;
  check_gradients_everywhere(gaussian(spec), 5, 43);
  check_gradients_everywhere(funnel(100), 5, 44);
  check_gradients_everywhere(rosenbrock(100, 10.0), 5, 45);
  check_gradients_everywhere(double_well(100), 5, 46, 2.5);
  check_gradients_everywhere(mixture3(100), 5, 47, 4.0);
}

TEST_CASE("eight schools: dimension, gradient, dataset validation") {
  auto data = classic_eight_schools();
  auto t = eight_schools(data);
  CHECK(t.dimension == 10);
  check_gradients_everywhere(t, 100, 51);

  auto bad = data;
  bad.columns["sigma"](3) = 0.0;
  CHECK_THROWS_AS(eight_schools(bad), DataError);
  auto missing = data;
  missing.columns.erase("sigma");
  CHECK_THROWS_AS(eight_schools(missing), DataError);
}

TEST_CASE("german credit: dimensions, gradients, label domain") {
  auto data = synthetic_german_credit(60, 7);
  auto t = german_credit(data, false);
  CHECK(t.dimension == 26);
  check_gradients_everywhere(t, 60, 52);

  auto ts = german_credit(data, true);
  CHECK(ts.dimension == 51);
  check_gradients_everywhere(ts, 60, 53);

  auto bad = data;
  bad.columns["y"](0) = 2.0;
  CHECK_THROWS_AS(german_credit(bad, false), DataError);
}

TEST_CASE("build_target dispatch and errors") {
  TargetSpec s;
  s.family = "standard_gaussian";
  s.dim = 100;
  auto t = build_target(s, std::nullopt);
  CHECK(t.dimension == 100);
  CHECK(reference_moments(t).second_moment.isApproxToConstant(1.0));

  s.family = "funnel";
  CHECK(build_target(s, std::nullopt).dimension == 100);

  s.family = "rosenbrock";
  s.dim = 7;
  CHECK_THROWS_AS(build_target(s, std::nullopt), SpecError);

  s.family = "nope";
  CHECK_THROWS_AS(build_target(s, std::nullopt), SpecError);

  s.family = "eight_schools";
  CHECK_THROWS_AS(build_target(s, std::nullopt), DataError);

  // Real-world posterior without a reference file: moments unavailable.
  TargetSpec es;
  es.family = "eight_schools";
  auto te = build_target(es, classic_eight_schools());
  CHECK(te.dimension == 10);
  CHECK_THROWS_AS(reference_moments(te), MomentsUnavailable);
}

TEST_CASE("non-finite input raises InputError") {
  auto t = standard_gaussian(3);
  Vec x = Vec::Zero(3);
  x(1) = std::numeric_limits<Real>::infinity();
  CHECK_THROWS_AS(log_density(t, x), InputError);
  CHECK_THROWS_AS(grad_log_density(t, x), InputError);
  CHECK_THROWS_AS(log_density(t, Vec::Zero(2)), InputError);
}
