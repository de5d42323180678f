#include <doctest.h>

#include <cmath>

#include "nfbench/random.hpp"
#include "nfbench/tape.hpp"

using namespace nfbench;
namespace d = nfbench::diff;

TEST_CASE("evaluate: identity, inverse pair, hand arithmetic") {
  {
    d::Tape t;
    d::Var x = t.input(Vec::Constant(1, 3.0));
    t.set_output(x);
    CHECK(t.evaluate({Vec::Constant(1, 3.0)})(0) == doctest::Approx(3.0));
  }
  {
    d::Tape t;
    d::Var x = t.input(Vec::Constant(1, 2.5));
    d::Var y = d::exp(d::log(x));
    t.set_output(y);
    CHECK(t.evaluate({Vec::Constant(1, 2.5)})(0) == doctest::Approx(2.5));
  }
  {
    // f(x, y) = x*y + x at (2, 3) -> 8
    d::Tape t;
    d::Var x = t.input(Vec::Constant(1, 2.0));
    d::Var y = t.input(Vec::Constant(1, 3.0));
    d::Var f = x * y + x;
    t.set_output(f);
    CHECK(f.scalar() == doctest::Approx(8.0));
  }
}

TEST_CASE("evaluate is deterministic bit-for-bit") {
  RandomStream rng(7);
  d::Tape t;
  Vec p = rng.normal_vector(5);
  d::Var x = t.input(p);
  d::Var f = d::sum(d::tanh(x) * d::exp(x * 0.3) + d::sigmoid(x));
  t.set_output(f);
  Vec a = t.evaluate({p});
  Vec b = t.evaluate({p});
  CHECK(std::memcmp(a.data(), b.data(), sizeof(Real) * a.size()) == 0);
}

TEST_CASE("gradient: basic rules") {
  {
    // f(x) = x^2 at 3 -> 6
    d::Tape t;
    d::Var x = t.input(Vec::Constant(1, 3.0));
    t.set_output(d::square(x));
    CHECK(t.gradient({Vec::Constant(1, 3.0)})(0) == doctest::Approx(6.0));
  }
  {
    // constant function -> 0
    d::Tape t;
    d::Var x = t.input(Vec::Constant(1, 1.5));
    d::Var c = x.tape->constant(4.0) + 0.0 * x;
    t.set_output(c);
    CHECK(t.gradient({Vec::Constant(1, 1.5)})(0) == doctest::Approx(0.0));
  }
  {
    // tanh'(0) = 1
    d::Tape t;
    d::Var x = t.input(Vec::Zero(1));
    t.set_output(d::tanh(x));
    CHECK(t.gradient({Vec::Zero(1)})(0) == doctest::Approx(1.0));
  }
}

TEST_CASE("gradient requires a single scalar output") {
  d::Tape t;
  d::Var x = t.input(Vec::Constant(1, 1.0));
  t.set_output(d::square(x));
  t.set_output(d::exp(x));
  CHECK_THROWS_AS(t.gradient({Vec::Constant(1, 1.0)}), ContractViolation);
}

TEST_CASE("non-finite intermediate raises NumericalError with node index") {
  // Recording computes primals, so the throw happens at record time.
  d::Tape t;
  d::Var x = t.input(Vec::Constant(1, 1.0));
  bool threw = false;
  try {
    d::Var y = d::log(x - 2.0);  // log of a negative number
    (void)y;
  } catch (const NumericalError& e) {
    threw = true;
    CHECK(e.node_index >= 0);
  }
  CHECK(threw);

  // A recorded graph re-evaluated into a bad region throws too.
  d::Tape t2;
  d::Var x2 = t2.input(Vec::Constant(1, 3.0));
  d::Var y2 = d::log(x2 - 2.0);
  t2.set_output(y2);
  CHECK_THROWS_AS(t2.evaluate({Vec::Constant(1, 1.0)}), NumericalError);
}

TEST_CASE("check_gradient oracle cases") {
  // Quadratic form: f(x) = x' A x with fixed A.
  RandomStream rng(11);
  Mat a = rng.normal_matrix(4, 4);
  auto quad = [&](d::Tape& t, d::Var x) {
    d::Var av = t.constant_matrix(a);
    return d::dot(x, d::matvec(av, x));
  };
  Vec p = rng.normal_vector(4);
  CHECK(d::check_gradient(quad, p, 1e-5) < 1e-6);

  // Linear function: central differences are exact up to rounding.
  Vec w = rng.normal_vector(4);
  auto lin = [&](d::Tape& t, d::Var x) { return d::dot(t.constant(w), x); };
  CHECK(d::check_gradient(lin, p, 1e-5) < 1e-9);

  // Standard Gaussian log density.
  auto gauss = [](d::Tape& t, d::Var x) {
    (void)t;
    return d::std_normal_logpdf(x);
  };
  CHECK(d::check_gradient(gauss, rng.normal_vector(6), 1e-5) < 1e-5);
}

TEST_CASE("every operation kind matches finite differences at random points") {
  RandomStream rng(123);
  auto check_many = [&](const std::function<d::Var(d::Tape&, d::Var)>& f, int dim,
                        bool positive) {
    for (int rep = 0; rep < 100; ++rep) {
      Vec p = rng.normal_vector(dim);
      if (positive) p = p.array().abs() + 0.5;
      CAPTURE(rep);
      CHECK(d::check_gradient(f, p, 1e-5) < 1e-5);
    }
  };

  Mat w = rng.normal_matrix(3, 5);
  Vec b = rng.normal_vector(3);
  Vec v = rng.normal_vector(5);

  check_many([](d::Tape&, d::Var x) { return d::sum(x + x * 2.0); }, 5, false);
  check_many([&](d::Tape& t, d::Var x) { return d::sum(x - t.constant(v)); }, 5, false);
  check_many([&](d::Tape& t, d::Var x) { return d::sum(x * t.constant(v)); }, 5, false);
  check_many([&](d::Tape& t, d::Var x) { return d::sum(t.constant(v) / (x * x + 1.0)); },
             5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(-x); }, 5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::exp(x)); }, 5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::log(x)); }, 5, true);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::tanh(x)); }, 5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::sigmoid(x)); }, 5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::square(x)); }, 5, false);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::sqrt(x)); }, 5, true);
  check_many([](d::Tape&, d::Var x) { return d::sum(d::abs(x) + x * 3.0); }, 5, true);
  check_many([](d::Tape&, d::Var x) { return d::sum(x) * 2.0; }, 5, false);
  check_many([&](d::Tape& t, d::Var x) { return d::dot(x, t.constant(v)); }, 5, false);
  check_many(
      [&](d::Tape& t, d::Var x) { return d::sum(d::matvec(t.constant_matrix(w), x)); },
      5, false);
  check_many(
      [&](d::Tape& t, d::Var x) {
        return d::sum(d::affine(t.constant_matrix(w), x, t.constant(b)));
      },
      5, false);
  check_many(
      [&](d::Tape& t, d::Var x) { return d::sum(d::max(x, t.constant(v))); }, 5, false);
  check_many(
      [&](d::Tape& t, d::Var x) { return d::sum(d::min(x, t.constant(v))); }, 5, false);

  // Gradient also flows through the matrix operand of matvec.
  Vec x5 = rng.normal_vector(5);
  auto through_matrix = [&](d::Tape& t, d::Var m) {
    return d::sum(d::matvec(m, t.constant(x5), 3, 5));
  };
  for (int rep = 0; rep < 20; ++rep) {
    Vec p = rng.normal_vector(15);
    CHECK(d::check_gradient(through_matrix, p, 1e-5) < 1e-5);
  }
}

TEST_CASE("helpers: slice, concat, softmax, cumsum, softplus, logsumexp") {
  RandomStream rng(5);
  Vec p = rng.normal_vector(6);

  auto f1 = [](d::Tape&, d::Var x) {
    d::Var a = d::slice(x, 0, 3);
    d::Var b = d::slice(x, 3, 3);
    return d::dot(a, b);
  };
  CHECK(d::check_gradient(f1, p, 1e-5) < 1e-5);

  auto f2 = [](d::Tape&, d::Var x) {
    d::Var y = d::concat(d::slice(x, 3, 3), d::slice(x, 0, 3));
    return d::dot(y, y) + d::sum(d::softmax(x) * d::cumsum(x));
  };
  CHECK(d::check_gradient(f2, p, 1e-5) < 1e-5);

  auto f3 = [](d::Tape&, d::Var x) { return d::sum(d::softplus(x * 5.0)); };
  CHECK(d::check_gradient(f3, p, 1e-5) < 1e-5);

  auto f4 = [](d::Tape&, d::Var x) { return d::logsumexp(x * 3.0); };
  CHECK(d::check_gradient(f4, p, 1e-5) < 1e-5);

  // Values
  d::Tape t;
  d::Var x = t.input(p);
  CHECK(d::logsumexp(x).scalar() == doctest::Approx(log_sum_exp(p)));
  CHECK(d::softmax(x).value().sum() == doctest::Approx(1.0));
  CHECK(d::cumsum(x).value()(5) == doctest::Approx(p.sum()));
  CHECK(d::slice(x, 2, 2).value()(0) == doctest::Approx(p(2)));
}

TEST_CASE("reverse sweep visits each node at most once (cost bound)") {
  d::Tape t;
  d::Var x = t.input(Vec::Constant(3, 0.5));
  d::Var y = d::sum(d::tanh(x) * d::exp(x));
  t.set_output(y);
  std::size_t f0 = t.forward_visits();
  t.gradient({Vec::Constant(3, 0.5)});
  CHECK(t.reverse_visits() <= 2 * f0);
}

TEST_CASE("backward with explicit seeds gives vector-Jacobian products") {
  RandomStream rng(3);
  Mat w = rng.normal_matrix(4, 4);
  Vec p = rng.normal_vector(4);
  d::Tape t;
  d::Var x = t.input(p);
  d::Var y = d::matvec(t.constant_matrix(w), x);
  Vec seed = rng.normal_vector(4);
  t.backward({{y, seed}});
  Vec vjp = t.input_adjoint(0);
  Vec expect = w.transpose() * seed;
  CHECK((vjp - expect).lpNorm<Eigen::Infinity>() < 1e-12);
}
