// Acceptance suite: one pass/fail line per criterion, exit 0 only if all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "nfbench/harness.hpp"
#include "nfbench/training.hpp"

using namespace nfbench;

namespace {

struct Check {
  bool ok = true;
  std::vector<std::string> notes;
  void expect(bool condition, const std::string& what) {
    if (!condition) {
      ok = false;
      notes.push_back(what);
    }
  }
  template <typename... Args>
  void expectf(bool condition, const char* fmt, Args... args) {
    if (!condition) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), fmt, args...);
      ok = false;
      notes.emplace_back(buf);
    }
  }
};

std::string dataset_path() {
  for (const char* prefix : {"", "../", "../../", "../../../"}) {
    std::string candidate = std::string(prefix) + "data/eight_schools.json";
    if (std::filesystem::exists(candidate)) return candidate;
  }
  return "data/eight_schools.json";
}

Real fd_gradient_error(const targets::TargetDistribution& t, const Vec& x,
                       Real step = 1e-5) {
  Vec g = targets::grad_log_density(t, x);
  Real worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec hi = x, lo = x;
    hi(i) += step;
    lo(i) -= step;
    Real fd =
        (targets::log_density(t, hi) - targets::log_density(t, lo)) / (2.0 * step);
    Real denom = std::max({1.0, std::fabs(fd), std::fabs(g(i))});
    worst = std::max(worst, std::fabs(fd - g(i)) / denom);
  }
  return worst;
}

targets::PosteriorDataset synthetic_german_credit(int rows, std::uint64_t seed) {
  RandomStream rng(seed);
  targets::PosteriorDataset data;
  data.name = "german_credit";
  data.matrices["x"] = rng.normal_matrix(rows, 25);
  Vec y(rows);
  for (int i = 0; i < rows; ++i) y(i) = rng.uniform01() < 0.4 ? 0.0 : 1.0;
  data.columns["y"] = y;
  return data;
}

void perturb_flow(flows::FlowModel& flow, std::uint64_t seed, Real scale) {
  RandomStream rng(seed);
  Vec p = flow.parameters();
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) += rng.normal() * scale;
  flow.set_parameters(p);
}

const std::vector<std::string> kDeterministic = {
    "nice", "realnvp", "c_rq_nsf", "iaf", "ia_rq_nsf",
    "planar", "sylvester", "radial"};
const std::vector<std::string> kEstimator = {"iresnet", "resflow", "cnf_euler",
                                             "cnf_rk"};

// ---- criterion 1: gradient suite ----

void criterion_gradients(Check& check) {
  std::vector<targets::TargetDistribution> ts;
  ts.push_back(targets::standard_gaussian(100));
  ts.push_back(targets::diagonal_gaussian(100, Vec::LinSpaced(100, 1.0, 10.0)));
  {
    targets::GaussianSpec spec;
    spec.dimension = 100;
    spec.kind = targets::GaussianKind::kFullRank;
    spec.eigenvalues = Vec::LinSpaced(100, 1.0, 10.0);
    spec.rotation_seed = 3;
    ts.push_back(targets::gaussian(spec));
  }
  ts.push_back(targets::ill_conditioned_gaussian(100, 5));
  ts.push_back(targets::funnel(100));
  ts.push_back(targets::rosenbrock(100, 10.0));
  ts.push_back(targets::mixture3(100));
  ts.push_back(targets::mixture20(100, 7));
  ts.push_back(targets::double_well(10));
  ts.push_back(targets::double_well(100));
  ts.push_back(targets::eight_schools(harness::load_dataset(dataset_path())));
  {
    auto gc = synthetic_german_credit(40, 9);
    ts.push_back(targets::german_credit(gc, false));
    ts.push_back(targets::german_credit(gc, true));
  }
  RandomStream rng(11);
  for (const auto& t : ts) {
    Real worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      Vec x = rng.normal_vector(t.dimension);
      if (t.family == "multimodal") x *= 2.5;
      worst = std::max(worst, fd_gradient_error(t, x));
    }
    check.expectf(worst < 1e-5, "target %s gradient error %.3g >= 1e-5",
                  t.name.c_str(), worst);
  }

  // Flow parameter gradients at dimension 4, fixed probe streams.
  flows::FlowHyper h;
  h.rk_steps = 20;
  std::vector<std::string> archs = kDeterministic;
  for (const auto& a : kEstimator) archs.push_back(a);
  for (const auto& arch : archs) {
    flows::FlowModel flow = flows::build_flow(arch, 4, h, 59);
    perturb_flow(flow, 61, 0.3);
    RandomStream xrng(67);
    Real worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      Vec x = xrng.normal_vector(4);
      const std::uint64_t probe_seed = 9001 + rep;
      diff::Tape tape;
      RandomStream prng(probe_seed);
      auto rec = flow.record_forward(tape, tape.constant(x), true, &prng);
      diff::Var logq = diff::std_normal_logpdf(rec.output) + rec.log_det;
      tape.backward({{logq, Vec::Ones(1)}});
      Vec grad = flow.parameter_gradient(rec);

      Vec p0 = flow.parameters();
      auto value_at = [&](const Vec& p) {
        flow.set_parameters(p);
        RandomStream vr(probe_seed);
        return flow.log_density(x, &vr).value;
      };
      for (Eigen::Index i = 0; i < p0.size(); ++i) {
        Vec ph = p0, pl = p0;
        ph(i) += 1e-5;
        pl(i) -= 1e-5;
        Real fd = (value_at(ph) - value_at(pl)) / 2e-5;
        Real denom = std::max({1.0, std::fabs(fd), std::fabs(grad(i))});
        worst = std::max(worst, std::fabs(fd - grad(i)) / denom);
      }
      flow.set_parameters(p0);
      if (rep == 24 && arch != "nice" && arch != "realnvp") break;  // runtime cap
    }
    check.expectf(worst < 1e-4, "flow %s parameter-gradient error %.3g >= 1e-4",
                  arch.c_str(), worst);
  }
}

// ---- criterion 2: bijectivity ----

void criterion_bijectivity(Check& check) {
  flows::FlowHyper h;
  h.probes = 0;
  h.rk_steps = 40;
  for (int dim : {2, 4, 10}) {
    for (const auto& arch : kDeterministic) {
      flows::FlowModel flow = flows::build_flow(arch, dim, h, 11);
      perturb_flow(flow, 21 + dim, 0.5);
      RandomStream rng(31 + dim);
      Real worst = 0.0;
      for (int rep = 0; rep < 100; ++rep) {
        Vec x = rng.normal_vector(dim) * 1.5;
        auto f = flow.forward(x);
        worst = std::max(worst,
                         (flow.inverse(f.point).point - x).lpNorm<Eigen::Infinity>());
      }
      check.expectf(worst < 1e-6, "%s dim %d reconstruction %.3g >= 1e-6",
                    arch.c_str(), dim, worst);
    }
    for (const auto& arch : {std::string("iresnet"), std::string("resflow")}) {
      flows::FlowModel flow = flows::build_flow(arch, dim, h, 13);
      perturb_flow(flow, 41 + dim, 0.3);
      RandomStream rng(51 + dim);
      Real worst = 0.0;
      for (int rep = 0; rep < 100; ++rep) {
        Vec x = rng.normal_vector(dim) * 1.5;
        auto f = flow.forward(x);
        worst = std::max(worst,
                         (flow.inverse(f.point).point - x).lpNorm<Eigen::Infinity>());
      }
      check.expectf(worst < 1e-6, "%s dim %d reconstruction %.3g >= 1e-6",
                    arch.c_str(), dim, worst);
    }
    {
      flows::FlowModel euler = flows::build_flow("cnf_euler", dim, h, 17);
      perturb_flow(euler, 61 + dim, 0.05);
      flows::FlowModel rk = flows::build_flow("cnf_rk", dim, h, 19);
      perturb_flow(rk, 71 + dim, 0.3);
      RandomStream rng(81 + dim);
      Real worst_euler = 0.0, worst_rk = 0.0;
      for (int rep = 0; rep < 100; ++rep) {
        Vec x = rng.normal_vector(dim) * 1.5;
        auto fe = euler.forward(x);
        worst_euler = std::max(
            worst_euler, (euler.inverse(fe.point).point - x).lpNorm<Eigen::Infinity>());
        auto fr = rk.forward(x);
        worst_rk = std::max(
            worst_rk, (rk.inverse(fr.point).point - x).lpNorm<Eigen::Infinity>());
      }
      check.expectf(worst_euler < 1e-3, "cnf_euler dim %d reconstruction %.3g >= 1e-3",
                    dim, worst_euler);
      check.expectf(worst_rk < 1e-6, "cnf_rk dim %d reconstruction %.3g >= 1e-6", dim,
                    worst_rk);
    }
  }
}

// ---- criterion 3: change of variables ----

void criterion_normalization(Check& check) {
  flows::FlowHyper h;
  h.probes = 0;
  h.rk_steps = 30;
  h.euler_steps = 60;
  std::vector<std::string> archs = kDeterministic;
  for (const auto& a : kEstimator) archs.push_back(a);
  for (const auto& arch : archs) {
    flows::FlowModel flow = flows::build_flow(arch, 2, h, 47);
    perturb_flow(flow, 53, 0.05);
    const int n = 160;
    const Real lo = -8.0, hi = 8.0;
    Real cell = (hi - lo) / n;
    Real mass = 0.0;
    Vec x(2);
    for (int i = 0; i < n; ++i) {
      x(0) = lo + (i + 0.5) * cell;
      for (int j = 0; j < n; ++j) {
        x(1) = lo + (j + 0.5) * cell;
        mass += std::exp(flow.log_density(x).value) * cell * cell;
      }
    }
    check.expectf(std::fabs(mass - 1.0) < 1e-2, "%s integrates to %.4f", arch.c_str(),
                  mass);
  }
}

// ---- criterion 4: estimators ----

void criterion_estimators(Check& check) {
  // Power series on the exact half-slope layer: log(1.5) within 1e-6.
  auto make_layer = [&](flows::LogDetEstimator est, int probes) {
    flows::ContractiveResidualLayer layer(1, 1, 0.9, est, 30, 0.5, probes);
    RandomStream rng(1);
    layer.init(rng);
    Vec p(4);
    p << 0.9, 0.0, 5.0 / 9.0, 0.0;
    layer.set_params(p);
    return layer;
  };
  {
    auto layer = make_layer(flows::LogDetEstimator::kPowerSeries, 0);
    RandomStream rng(7);
    Real ld = flows::contractive_logdet(layer, Vec::Zero(1), rng);
    check.expectf(std::fabs(ld - std::log(1.5)) < 1e-6,
                  "power series log-det %.8f vs log(1.5)", ld);
  }
  {
    auto layer = make_layer(flows::LogDetEstimator::kRoulette, 1);
    RandomStream rng(9);
    const int n = 100000;
    Real sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
      Real v = flows::contractive_logdet(layer, Vec::Zero(1), rng);
      sum += v;
      sumsq += v * v;
    }
    Real mean = sum / n;
    Real sd = std::sqrt((sumsq / n - mean * mean) / n);
    check.expectf(std::fabs(mean - std::log(1.5)) <= 3.0 * sd,
                  "roulette mean %.5f vs log(1.5), 3se = %.5f", mean, 3.0 * sd);
  }
  {
    RandomStream rng(31);
    const int n = 100000;
    auto id = [](const Vec& w) { return w; };
    Real est = flows::hutchinson_trace(id, 6, n, rng);
    check.expectf(std::fabs(est - 6.0) < 3.0 * std::sqrt(2.0 * 6.0 / n),
                  "hutchinson identity trace %.4f", est);
    Vec diag(3);
    diag << 1, 2, 3;
    auto jv = [&](const Vec& w) { return Vec(diag.cwiseProduct(w)); };
    Real est2 = flows::hutchinson_trace(jv, 3, n, rng);
    Real se = std::sqrt(2.0 * diag.array().square().sum() / n);
    check.expectf(std::fabs(est2 - 6.0) <= 3.0 * se, "hutchinson diag trace %.4f",
                  est2);
  }
}

// ---- criterion 5: sampler exactness ----

void criterion_sampler_exactness(Check& check) {
  auto target = targets::standard_gaussian(10);
  auto ref = targets::reference_moments(target);
  for (const char* kind : {"mh", "hmc"}) {
    harness::ExperimentConfig config;
    config.seed = 17;
    config.target.family = "standard_gaussian";
    config.target.dim = 10;
    config.sampler.kind = kind;
    config.sampler.chains = 100;
    config.sampler.warmup.seconds = 30.0;
    config.sampler.sampling.seconds = 30.0;
    auto report = harness::run_experiment(config);
    check.expect(report.ok(), std::string(kind) + " run failed: " + report.error);
    if (report.ok()) {
      Real b2 = metrics::squared_bias(report.result.second_moment, ref.second_moment,
                                      ref.variance);
      check.expectf(b2 < 0.01, "%s b2 = %.5f >= 0.01", kind, b2);
    }
  }
  // Leapfrog reversibility at 1e-10.
  {
    auto funnel = targets::funnel(3);
    samplers::Density dens = samplers::plain_density(funnel);
    samplers::InverseMass mass{(Vec(3) << 0.7, 1.3, 1.0).finished()};
    RandomStream rng(9);
    Real worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      Vec x0 = rng.normal_vector(3), r0 = rng.normal_vector(3);
      Vec x = x0, r = r0;
      bool ok = samplers::leapfrog(x, r, 0.01, 25, dens, mass);
      r = -r;
      ok = ok && samplers::leapfrog(x, r, 0.01, 25, dens, mass);
      check.expect(ok, "leapfrog diverged in the reversibility check");
      worst = std::max(worst, (x - x0).lpNorm<Eigen::Infinity>());
      worst = std::max(worst, (r + r0).lpNorm<Eigen::Infinity>());
    }
    check.expectf(worst < 1e-10, "leapfrog reversibility error %.3g", worst);
  }
  // Detailed balance on the 3-state surrogate, mh and jump acceptance rules.
  {
    Vec pi(3), q(3);
    pi << 0.2, 0.3, 0.5;
    q << 0.5, 0.3, 0.2;
    for (bool jump : {false, true}) {
      RandomStream rng(jump ? 53 : 59);
      int state = 0;
      Mat counts = Mat::Zero(3, 3);
      const long n = 1000000;
      for (long i = 0; i < n; ++i) {
        int proposal;
        Real log_alpha;
        if (jump) {
          Real u = rng.uniform01();
          proposal = u < q(0) ? 0 : (u < q(0) + q(1) ? 1 : 2);
          log_alpha = std::log(pi(proposal)) - std::log(pi(state)) +
                      std::log(q(state)) - std::log(q(proposal));
        } else {
          int other = static_cast<int>(rng.uniform01() * 2.0);
          proposal = (state + 1 + other) % 3;
          log_alpha = std::log(pi(proposal)) - std::log(pi(state));
        }
        int next = samplers::metropolis_accept(log_alpha, rng) ? proposal : state;
        counts(state, next) += 1.0;
        state = next;
      }
      for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
          Real diff = counts(a, b) - counts(b, a);
          Real se = std::sqrt(counts(a, b) + counts(b, a));
          check.expectf(std::fabs(diff) <= 3.0 * se,
                        "detailed balance (%d,%d) jump=%d: |%.0f| > 3*%.1f", a, b,
                        static_cast<int>(jump), diff, se);
        }
    }
  }
}

// ---- criterion 6: neutra identity equivalence ----

void criterion_neutra_identity(Check& check) {
  auto target = targets::funnel(4);
  samplers::SamplerConfig mh;
  mh.kind = "mh";
  mh.chains = 20;
  mh.warmup.steps = 200;
  mh.sampling.steps = 500;
  samplers::RunResult plain =
      samplers::run_sampler(mh, target, nullptr, RandomStream(67));

  samplers::SamplerConfig neutra = mh;
  neutra.kind = "neutra_mh";
  neutra.svi.steps = 0;
  flows::FlowModel id = flows::identity_flow(4);
  samplers::RunResult adjusted =
      samplers::run_sampler(neutra, target, &id, RandomStream(67));

  check.expect(samplers::run_result_to_json(plain) ==
                   samplers::run_result_to_json(adjusted),
               "neutra_mh with the identity flow differs from plain mh");
}

// ---- criterion 7: perfect-proposal imh ----

void criterion_perfect_imh(Check& check) {
  samplers::SamplerConfig config;
  config.kind = "imh";
  config.chains = 20;
  config.warmup.steps = 0;
  config.sampling.steps = 500;  // 10^4 proposals
  config.svi.steps = 0;
  config.mle.steps = 0;
  auto target = targets::standard_gaussian(3);
  flows::FlowModel id = flows::identity_flow(3);
  samplers::RunResult r =
      samplers::run_sampler(config, target, &id, RandomStream(71));
  check.expect(r.accept_rate_jump.has_value(), "no jump acceptance recorded");
  if (r.accept_rate_jump)
    check.expectf(*r.accept_rate_jump == 1.0, "jump acceptance %.6f != 1",
                  *r.accept_rate_jump);
}

// ---- criterion 8: multimodal desk-scale reproduction ----

void criterion_multimodal(Check& check) {
  for (std::uint64_t seed : {101ull, 202ull, 303ull}) {
    auto t0 = std::chrono::steady_clock::now();
    targets::MixtureSpec mix;
    mix.component_means.resize(2, 2);
    mix.component_means << -10, -10, 10, 10;
    mix.component_stds = Vec::Ones(2);
    mix.weights = Vec::Constant(2, 0.5);
    auto target = targets::gaussian_mixture(mix, "two_mode_2d");

    // The fitted flow: maximum likelihood on direct mixture draws.
    RandomStream drng(mix_seed(seed, 1));
    const int n = 8192;
    Mat data(2, n);
    for (int i = 0; i < n; ++i) {
      Real mu = drng.uniform01() < 0.5 ? -10.0 : 10.0;
      data.col(i) = Vec::Constant(2, mu) + drng.normal_vector(2);
    }
    flows::FlowModel flow = flows::build_flow("realnvp", 2, {}, mix_seed(seed, 2));
    training::FitBudget budget;
    budget.max_steps = 1500;
    budget.patience = 1500;
    RandomStream frng(mix_seed(seed, 3));
    training::fit_mle(flow, data, budget, frng, 0.1, 256);

    samplers::SamplerConfig cfg;
    cfg.kind = "jump_mh";
    cfg.chains = 1;
    cfg.jump_interval = 25;
    cfg.warmup.steps = 0;  // keep the supplied fitted flow
    cfg.sampling.steps = 2500000;
    cfg.svi.steps = 0;
    cfg.mle.steps = 0;
    auto jump = samplers::run_sampler(cfg, target, &flow, RandomStream(mix_seed(seed, 5)));
    Real w_jump = (jump.first_moment(0) / 10.0 + 1.0) / 2.0;

    samplers::SamplerConfig mh = cfg;
    mh.kind = "mh";
    auto local = samplers::run_sampler(mh, target, nullptr,
                                       RandomStream(mix_seed(seed, 5)));
    Real w_mh = (local.first_moment(0) / 10.0 + 1.0) / 2.0;
    Real seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0)
                       .count();
    check.expectf(std::fabs(w_jump - 0.5) <= 0.05,
                  "seed %llu: jump_mh weight %.4f off by more than 0.05",
                  static_cast<unsigned long long>(seed), w_jump);
    check.expectf(std::fabs(w_mh - 0.5) > 0.2,
                  "seed %llu: plain mh weight %.4f not off by more than 0.2",
                  static_cast<unsigned long long>(seed), w_mh);
    check.expectf(seconds < 300.0, "seed %llu took %.0f s (budget 300 s)",
                  static_cast<unsigned long long>(seed), seconds);
  }
}

// ---- criterion 9: whitening neutra ----

void criterion_whitening(Check& check) {
  targets::GaussianSpec spec;
  spec.dimension = 10;
  spec.kind = targets::GaussianKind::kIllConditioned;
  RandomStream eig(31);
  spec.eigenvalues = Vec(10);
  for (int i = 0; i < 10; ++i) spec.eigenvalues(i) = 1.0 / eig.gamma_half();
  spec.rotation_seed = 37;
  auto target = targets::gaussian(spec);
  Mat q = targets::random_rotation(10, 37);
  flows::FlowModel white = flows::gaussian_whitening_flow(q, spec.eigenvalues);
  RandomStream rng(41);
  Real worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    Vec u = rng.normal_vector(10);
    auto [value, grad] = samplers::neutra_log_density(white, target, u);
    (void)value;
    worst = std::max(worst, (grad + u).lpNorm<Eigen::Infinity>());
  }
  check.expectf(worst < 1e-8, "adjusted gradient differs from -x by %.3g", worst);
}

// ---- criterion 10: metrics exactness ----

void criterion_metrics(Check& check) {
  RandomStream rng(7);
  const int n = 500, dim = 3;
  Mat data = rng.normal_matrix(dim, n);
  metrics::RunningMoments whole(dim);
  whole.update(data);
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    RandomStream splits(seed);
    metrics::RunningMoments acc(dim);
    int start = 0;
    while (start < n) {
      int len = 1 + static_cast<int>(splits.uniform01() * 40);
      len = std::min(len, n - start);
      acc.update(data.middleCols(start, len));
      start += len;
    }
    check.expect((acc.first_moment() - whole.first_moment()).lpNorm<Eigen::Infinity>() <
                     1e-10,
                 "running first moment differs from batch recomputation");
    check.expect(
        (acc.second_moment() - whole.second_moment()).lpNorm<Eigen::Infinity>() <
            1e-10,
        "running second moment differs from batch recomputation");
  }
  for (int k = 2; k <= 12; ++k) {
    Vec v = rng.normal_vector(k);
    Vec r = metrics::standardize_ranks(v);
    check.expect(std::fabs(r.mean()) < 1e-12, "standardized ranks mean nonzero");
    Real sd = std::sqrt((r.array() - r.mean()).square().sum() / (k - 1));
    check.expect(std::fabs(sd - 1.0) < 1e-12, "standardized ranks sd differs from 1");
  }
  // Worked examples.
  Vec est1(1), t1(1), v1(1);
  est1 << 2.0;
  t1 << 1.0;
  v1 << 2.0;
  check.expect(metrics::squared_bias(est1, t1, v1) == 0.5, "b2 worked example 0.5");
  Vec est2(2), t2 = Vec::Ones(2), v2 = Vec::Ones(2);
  est2 << 1.0 + std::sqrt(0.1), 1.0 + std::sqrt(0.5);
  check.expect(std::fabs(metrics::squared_bias(est2, t2, v2) - 0.5) < 1e-15,
               "b2 max semantics");
  Vec b3(3);
  b3 << 0.1, 0.2, 0.3;
  Vec r3 = metrics::standardize_ranks(b3);
  check.expect(r3(0) == -1.0 && r3(1) == 0.0 && r3(2) == 1.0, "ranks (1,2,3)");
  Vec b2v(2);
  b2v << 5.0, 1.0;
  Vec r2 = metrics::standardize_ranks(b2v);
  check.expect(std::fabs(r2(0) - 0.7071067811865475) < 1e-15, "two-method ranks");
  std::vector<metrics::RankTable> tables(3);
  const char* names[] = {"t1", "t2", "t3"};
  Real b2s[3][3] = {{0.1, 0.2, 0.3}, {0.2, 0.1, 0.3}, {0.3, 0.1, 0.2}};
  for (int t = 0; t < 3; ++t) {
    tables[t].target = names[t];
    tables[t].b2_by_method = {{"ma", b2s[t][0]}, {"mb", b2s[t][1]}, {"mc", b2s[t][2]}};
  }
  auto agg = metrics::aggregate_ranks(tables);
  check.expect(std::fabs(agg.at("ma").mean_rank) < 1e-15, "aggregate mean rank 0");
  check.expect(std::fabs(*agg.at("ma").std_error - 1.0 / std::sqrt(3.0)) < 1e-15,
               "aggregate std error 1/sqrt(3)");
}

// ---- criterion 11: determinism ----

void criterion_determinism(Check& check) {
  std::string text =
      R"({"seed": 7,
          "target": {"family": "standard_gaussian", "dim": 2},
          "sampler": {"kind": "jump_mh", "chains": 8},
          "flow": {"architecture": "realnvp"},
          "budget": {"warmup_steps": 50, "sampling_steps": 100,
                     "svi_steps": 60, "mle_steps": 40}})";
  harness::ExperimentConfig config = harness::parse_config_text(text);
  harness::ExperimentReport a = harness::run_experiment(config);
  harness::ExperimentReport b = harness::run_experiment(config);
  check.expect(a.ok(), "run failed: " + a.error);
  check.expect(harness::report_to_json(a) == harness::report_to_json(b),
               "reports differ between reruns");
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* title;
    std::function<void(Check&)> fn;
  };
  std::vector<Criterion> criteria = {
      {1, "gradient suite: targets 1e-5, flow parameters 1e-4", criterion_gradients},
      {2, "bijectivity: reconstruction at dims 2/4/10", criterion_bijectivity},
      {3, "change of variables: 2-D densities integrate to 1", criterion_normalization},
      {4, "estimators: power series, roulette, hutchinson", criterion_estimators},
      {5, "sampler exactness: b2 < 0.01, reversibility, detailed balance",
       criterion_sampler_exactness},
      {6, "neutra identity flow reproduces plain mh bit-exactly",
       criterion_neutra_identity},
      {7, "perfect-proposal imh accepts at rate exactly 1", criterion_perfect_imh},
      {8, "multimodal: jump_mh recovers mode weights where mh fails",
       criterion_multimodal},
      {9, "whitening neutra: adjusted gradient equals -x", criterion_whitening},
      {10, "metrics exactness: merges, ranks, worked examples", criterion_metrics},
      {11, "determinism: rerun produces a byte-identical report",
       criterion_determinism},
  };
  bool all_ok = true;
  for (auto& criterion : criteria) {
    Check check;
    auto t0 = std::chrono::steady_clock::now();
    try {
      criterion.fn(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    Real seconds =
        std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[criterion %02d] %s (%.1f s) %s\n", criterion.id,
                check.ok ? "PASS" : "FAIL", seconds, criterion.title);
    for (const auto& note : check.notes) std::printf("    - %s\n", note.c_str());
    std::fflush(stdout);
    all_ok = all_ok && check.ok;
  }
  return all_ok ? 0 : 1;
}
