#include <doctest.h>

#include <cmath>

#include "nfbench/errors.hpp"
#include "nfbench/metrics.hpp"
#include "nfbench/random.hpp"

using namespace nfbench;
using namespace nfbench::metrics;

TEST_CASE("running moments: weighted merge arithmetic") {
  RunningMoments acc(1);
  Mat b1(1, 2), b2(1, 2);
  b1 << 1.0, 1.0;
  b2 << 3.0, 3.0;
  acc.update(b1);
  acc.update(b2);
  CHECK(acc.count() == 4);
  CHECK(acc.first_moment()(0) == doctest::Approx(2.0).epsilon(1e-15));

  // A single batch equals the plain average.
  RunningMoments one(1);
  Mat all(1, 4);
  all << 1.0, 1.0, 3.0, 3.0;
  one.update(all);
  CHECK(one.first_moment()(0) == acc.first_moment()(0));
  CHECK(one.second_moment()(0) == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("running moments: streaming equals one-shot within 1e-10") {
  RandomStream rng(3);
  const int n = 10000, dim = 5;
  Mat data = rng.normal_matrix(dim, n);
  RunningMoments stream(dim);
  for (int start = 0; start < n; start += 7) {
    int len = std::min(7, n - start);
    stream.update(data.middleCols(start, len));
  }
  Vec mean = data.rowwise().mean();
  Vec second = data.array().square().rowwise().mean();
  CHECK((stream.first_moment() - mean).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK((stream.second_moment() - second).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK(stream.count() == n);
}

TEST_CASE("running moments: arbitrary batching and pairwise merge agree") {
  RandomStream rng(7);
  const int n = 500, dim = 3;
  Mat data = rng.normal_matrix(dim, n);
  RunningMoments whole(dim);
  whole.update(data);
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    RandomStream splits(seed);
    RunningMoments acc(dim);
    int start = 0;
    while (start < n) {
      int len = 1 + static_cast<int>(splits.uniform01() * 40);
      len = std::min(len, n - start);
      RunningMoments part(dim);
      part.update(data.middleCols(start, len));
      acc.merge(part);
      start += len;
    }
    CHECK((acc.first_moment() - whole.first_moment()).lpNorm<Eigen::Infinity>() <
          1e-10);
    CHECK((acc.second_moment() - whole.second_moment()).lpNorm<Eigen::Infinity>() <
          1e-10);
  }
}

TEST_CASE("running moments: transform applied once, non-finite points dropped") {
  auto transform = [](const Vec& x) -> Vec {
    if (x(0) > 1.0) return Vec::Constant(x.size(), std::nan(""));
    return 2.0 * x;
  };
  RunningMoments acc(1, transform);
  Mat batch(1, 4);
  batch << 0.5, 2.0, -0.5, 0.25;
  acc.update(batch);
  CHECK(acc.dropped() == 1);
  CHECK(acc.count() == 3);
  CHECK(acc.first_moment()(0) == doctest::Approx(2.0 * 0.25 / 3.0 * 1.0 +
                                                 2.0 * (0.5 - 0.5) / 3.0)
                                     .epsilon(1e-12));
}

TEST_CASE("squared bias") {
  Vec t = Vec::Ones(3), v = Vec::Ones(3);
  CHECK(squared_bias(t, t, v) == 0.0);

  Vec est1(1), t1(1), v1(1);
  est1 << 2.0;
  t1 << 1.0;
  v1 << 2.0;
  CHECK(squared_bias(est1, t1, v1) == doctest::Approx(0.5));

  // max semantics over dimensions
  Vec est2(2), t2(2), v2(2);
  t2 << 1.0, 1.0;
  v2 << 1.0, 1.0;
  est2 << 1.0 + std::sqrt(0.1), 1.0 + std::sqrt(0.5);
  CHECK(squared_bias(est2, t2, v2) == doctest::Approx(0.5));

  CHECK_THROWS_AS(squared_bias(est2, t1, v1), InputError);
  Vec vbad(2);
  vbad << 1.0, 0.0;
  CHECK_THROWS_AS(squared_bias(est2, t2, vbad), InputError);

  // Scale consistency: errors scaling as sqrt(variance) leave b^2 unchanged.
  RandomStream rng(5);
  Vec base_err = rng.normal_vector(4);
  for (Real c : {0.5, 2.0, 117.0}) {
    Vec var = Vec::Constant(4, 1.0), varc = Vec::Constant(4, c);
    Vec truth = Vec::Ones(4);
    Vec est_a = truth + base_err;
    Vec est_b = truth + std::sqrt(c) * base_err;
    CHECK(squared_bias(est_a, truth, var) ==
          doctest::Approx(squared_bias(est_b, truth, varc)).epsilon(1e-12));
  }
}

TEST_CASE("standardize_ranks") {
  Vec v3(3);
  v3 << 0.1, 0.2, 0.3;
  Vec r3 = standardize_ranks(v3);
  CHECK(r3(0) == doctest::Approx(-1.0));
  CHECK(r3(1) == doctest::Approx(0.0));
  CHECK(r3(2) == doctest::Approx(1.0));

  Vec v2(2);
  v2 << 5.0, 1.0;
  Vec r2 = standardize_ranks(v2);
  CHECK(r2(0) == doctest::Approx(0.7071067811865475));
  CHECK(r2(1) == doctest::Approx(-0.7071067811865475));

  Vec tied = Vec::Constant(4, 2.0);
  CHECK_THROWS_AS(standardize_ranks(tied), DegenerateRanks);
  CHECK_THROWS_AS(standardize_ranks(Vec::Ones(1)), DegenerateRanks);

  // Ties get average ranks; the output keeps mean 0.
  Vec vt(3);
  vt << 1.0, 1.0, 2.0;
  Vec rt = standardize_ranks(vt);
  CHECK(rt(0) == rt(1));
  CHECK(std::fabs(rt.mean()) < 1e-14);

  // Property: mean 0 exactly-ish and sd 1 within 1e-12 for K >= 2.
  RandomStream rng(11);
  for (int k = 2; k <= 12; ++k) {
    Vec v = rng.normal_vector(k);
    Vec r = standardize_ranks(v);
    CHECK(std::fabs(r.mean()) < 1e-12);
    Real sd = std::sqrt((r.array() - r.mean()).square().sum() / (k - 1));
    CHECK(sd == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("aggregate_ranks") {
  auto table = [](const std::string& target, Real a, Real b, Real c) {
    RankTable t;
    t.target = target;
    t.b2_by_method = {{"ma", a}, {"mb", b}, {"mc", c}};
    return t;
  };
  // Single target: mean rank equals the standardized rank, no std error.
  {
    auto out = aggregate_ranks({table("t1", 0.1, 0.2, 0.3)});
    CHECK(out.at("ma").mean_rank == doctest::Approx(-1.0));
    CHECK(!out.at("ma").std_error.has_value());
  }
  // Identical ordering on all targets: zero std error.
  {
    auto out = aggregate_ranks(
        {table("t1", 0.1, 0.2, 0.3), table("t2", 1.0, 2.0, 3.0)});
    CHECK(out.at("mb").std_error.has_value());
    CHECK(*out.at("mb").std_error == doctest::Approx(0.0));
  }
  // Ranks (-1, 0, 1) across three targets for one method.
  {
    auto out = aggregate_ranks({table("t1", 0.1, 0.2, 0.3),
                                table("t2", 0.2, 0.1, 0.3),
                                table("t3", 0.3, 0.1, 0.2)});
    CHECK(out.at("ma").mean_rank == doctest::Approx(0.0));
    CHECK(*out.at("ma").std_error == doctest::Approx(1.0 / std::sqrt(3.0)));
  }
  // Inconsistent method sets are rejected.
  {
    RankTable bad;
    bad.target = "t2";
    bad.b2_by_method = {{"ma", 0.1}, {"mb", 0.2}};
    CHECK_THROWS_AS(aggregate_ranks({table("t1", 0.1, 0.2, 0.3), bad}), InputError);
  }
}
