#include "nfbench/samplers.hpp"

#include <chrono>
#include <cmath>

#include "json.hpp"
#include "nfbench/errors.hpp"
#include "nfbench/training.hpp"

namespace nfbench::samplers {

namespace d = nfbench::diff;

Density plain_density(const targets::TargetDistribution& target) {
  Density dens;
  dens.dim = target.dimension;
  dens.logp = [&target](const Vec& x) { return targets::log_density(target, x); };
  dens.grad = [&target](const Vec& x) { return targets::grad_log_density(target, x); };
  return dens;
}

std::pair<Real, Vec> neutra_log_density(const flows::FlowModel& flow,
                                        const targets::TargetDistribution& target,
                                        const Vec& x, RandomStream* rng) {
  d::Tape tape;
  d::Var xv = tape.input(x);
  auto rec = flow.record_inverse(tape, xv, false, rng, true);
  const Vec& data_point = rec.output.value();
  Real value = targets::log_density(target, data_point) + rec.log_det.scalar();
  Vec seed = targets::grad_log_density(target, data_point);
  tape.backward({{rec.output, seed}, {rec.log_det, Vec::Ones(1)}});
  return {value, tape.adjoint(xv)};
}

Density neutra_density(const flows::FlowModel& flow,
                       const targets::TargetDistribution& target, RandomStream* rng) {
  Density dens;
  dens.dim = flow.dim();
  dens.logp = [&flow, &target, rng](const Vec& u) {
    auto inv = flow.inverse(u, rng);
    return targets::log_density(target, inv.point) + inv.log_det;
  };
  dens.grad = [&flow, &target, rng](const Vec& u) {
    return neutra_log_density(flow, target, u, rng).second;
  };
  return dens;
}

DualAveragingState DualAveragingState::create(Real initial_step, Real target) {
  DualAveragingState s;
  s.mu = std::log(10.0 * initial_step);
  s.log_eps = std::log(initial_step);
  s.log_eps_avg = std::log(initial_step);
  s.target_accept = target;
  return s;
}

void dual_averaging_update(DualAveragingState& state, Real observed_accept) {
  if (state.frozen) return;
  state.t += 1;
  Real t = static_cast<Real>(state.t);
  Real w = 1.0 / (t + state.t0);
  state.h_bar = (1.0 - w) * state.h_bar + w * (state.target_accept - observed_accept);
  state.log_eps = state.mu - std::sqrt(t) / state.gamma * state.h_bar;
  Real eta = std::pow(t, -state.kappa);
  state.log_eps_avg = eta * state.log_eps + (1.0 - eta) * state.log_eps_avg;
}

ChainPool ChainPool::create(int dim, int chains, const RandomStream& root) {
  if (chains < 1) throw ContractViolation("chain pool: need at least one chain");
  ChainPool pool;
  pool.states.resize(dim, chains);
  pool.streams.reserve(static_cast<std::size_t>(chains));
  for (int i = 0; i < chains; ++i) {
    pool.streams.push_back(root.child(static_cast<std::uint64_t>(i)));
    pool.states.col(i) = pool.streams.back().normal_vector(dim);
  }
  return pool;
}

void ChainPool::ensure_cache(const Density& density) {
  if (cached_logp.size() == states.cols()) return;
  cached_logp.resize(states.cols());
  for (Eigen::Index i = 0; i < states.cols(); ++i) {
    try {
      cached_logp(i) = density.logp(states.col(i));
    } catch (const Error&) {
      cached_logp(i) = -std::numeric_limits<Real>::infinity();
    }
  }
}

bool metropolis_accept(Real log_alpha, RandomStream& rng) {
  Real w = rng.uniform01();
  return log_alpha > std::log(w);
}

namespace {

Real safe_logp(const Density& density, const Vec& x, bool& ok) {
  try {
    Real v = density.logp(x);
    ok = std::isfinite(v) || v == -std::numeric_limits<Real>::infinity();
    return v;
  } catch (const Error&) {
    ok = false;
    return -std::numeric_limits<Real>::infinity();
  }
}

Real clipped_alpha(Real log_alpha) {
  return std::fmin(1.0, std::exp(std::fmin(log_alpha, 0.0)));
}

}  // namespace

StepStats mh_step(ChainPool& pool, const Density& density, const InverseMass& mass,
                  Real proposal_scale) {
  pool.ensure_cache(density);
  StepStats stats;
  Real alpha_sum = 0.0;
  for (Eigen::Index i = 0; i < pool.states.cols(); ++i) {
    RandomStream& rng = pool.streams[static_cast<std::size_t>(i)];
    Vec u = rng.normal_vector(pool.dim());
    Vec proposal =
        pool.states.col(i) + proposal_scale * mass.diag.cwiseProduct(u);
    bool ok = true;
    Real lp = safe_logp(density, proposal, ok);
    Real log_alpha = lp - pool.cached_logp(i);
    if (!ok || std::isnan(log_alpha)) {
      ++stats.auto_rejects;
      rng.uniform01();  // keep the stream aligned with accepted paths
      continue;
    }
    alpha_sum += clipped_alpha(log_alpha);
    if (metropolis_accept(log_alpha, rng)) {
      pool.states.col(i) = proposal;
      pool.cached_logp(i) = lp;
    }
  }
  stats.accept_fraction = alpha_sum / static_cast<Real>(pool.chains());
  ++pool.step_index;
  return stats;
}

bool leapfrog(Vec& x, Vec& r, Real step, int steps, const Density& density,
              const InverseMass& mass) {
  if (step == 0.0 || steps < 1)
    throw ContractViolation("leapfrog: step must be nonzero and steps >= 1");
  Vec g;
  try {
    g = density.grad(x);
  } catch (const Error&) {
    return false;
  }
  if (!g.allFinite()) return false;
  for (int k = 0; k < steps; ++k) {
    r += 0.5 * step * g;
    x += step * mass.diag.cwiseProduct(r);
    if (!x.allFinite()) return false;
    try {
      g = density.grad(x);
    } catch (const Error&) {
      return false;
    }
    if (!g.allFinite()) return false;
    r += 0.5 * step * g;
  }
  return true;
}

StepStats hmc_step(ChainPool& pool, const Density& density, const InverseMass& mass,
                   const DualAveragingState& dual_avg, int leapfrog_steps) {
  pool.ensure_cache(density);
  StepStats stats;
  Real alpha_sum = 0.0;
  Real eps = dual_avg.step_size();
  Vec inv_sqrt = mass.diag.cwiseSqrt();
  auto kinetic = [&](const Vec& r) {
    return 0.5 * (mass.diag.array() * r.array().square()).sum();
  };
  for (Eigen::Index i = 0; i < pool.states.cols(); ++i) {
    RandomStream& rng = pool.streams[static_cast<std::size_t>(i)];
    Vec u = rng.normal_vector(pool.dim());
    // Momentum from exp(-r' M^-1 r / 2), i.e. r ~ N(0, M).
    Vec r0 = u.cwiseQuotient(inv_sqrt);
    Vec x = pool.states.col(i);
    Vec r = r0;
    bool ok = leapfrog(x, r, eps, leapfrog_steps, density, mass);
    Real lp = 0.0;
    if (ok) lp = safe_logp(density, x, ok);
    if (!ok) {
      ++stats.divergences;
      rng.uniform01();
      continue;
    }
    Real log_alpha = lp - pool.cached_logp(i) - (kinetic(r) - kinetic(r0));
    if (std::isnan(log_alpha)) {
      ++stats.divergences;
      rng.uniform01();
      continue;
    }
    alpha_sum += clipped_alpha(log_alpha);
    if (metropolis_accept(log_alpha, rng)) {
      pool.states.col(i) = x;
      pool.cached_logp(i) = lp;
    }
  }
  stats.accept_fraction = alpha_sum / static_cast<Real>(pool.chains());
  ++pool.step_index;
  return stats;
}

StepStats jump_step(const flows::FlowModel& flow, const Density& density,
                    ChainPool& pool) {
  pool.ensure_cache(density);
  StepStats stats;
  Real alpha_sum = 0.0;
  for (Eigen::Index i = 0; i < pool.states.cols(); ++i) {
    RandomStream& rng = pool.streams[static_cast<std::size_t>(i)];
    Vec z = rng.normal_vector(pool.dim());
    bool ok = true;
    Vec proposal;
    Real logq_prop = 0.0, logq_cur = 0.0, lp = 0.0;
    try {
      auto inv = flow.inverse(z, &rng);
      proposal = inv.point;
      logq_prop = std_normal_logpdf(z) - inv.log_det;
      logq_cur = flow.log_density(pool.states.col(i), &rng).value;
      lp = safe_logp(density, proposal, ok);
    } catch (const Error&) {
      ok = false;
    }
    if (!ok || !std::isfinite(logq_cur) || !std::isfinite(logq_prop)) {
      // Non-finite flow density at the current state signals poor support.
      ++stats.auto_rejects;
      rng.uniform01();
      continue;
    }
    Real log_alpha = lp - pool.cached_logp(i) + logq_cur - logq_prop;
    if (std::isnan(log_alpha)) {
      ++stats.auto_rejects;
      rng.uniform01();
      continue;
    }
    alpha_sum += clipped_alpha(log_alpha);
    if (metropolis_accept(log_alpha, rng)) {
      pool.states.col(i) = proposal;
      pool.cached_logp(i) = lp;
    }
  }
  stats.accept_fraction = alpha_sum / static_cast<Real>(pool.chains());
  ++pool.step_index;
  return stats;
}

InverseMass adapt_inverse_mass(const InverseMass& current, const ChainPool& pool,
                               long t) {
  if (pool.chains() < 2) return current;
  Vec mean = pool.states.rowwise().mean();
  Vec var = (pool.states.colwise() - mean).array().square().rowwise().sum() /
            static_cast<Real>(pool.chains() - 1);
  InverseMass next;
  next.diag = current.diag +
              std::pow(0.999, static_cast<Real>(t)) * var.array().sqrt().matrix();
  next.diag = next.diag.cwiseMax(1e-8);
  return next;
}

// ---- run_sampler ----

namespace {

struct PhaseClock {
  std::chrono::steady_clock::time_point start;
  Real seconds_limit;
  long step_limit;
  bool step_mode;
  long step = 0;

  static PhaseClock begin(const Budget& budget) {
    PhaseClock c{std::chrono::steady_clock::now(), budget.seconds, budget.steps,
                 budget.step_mode(), 0};
    return c;
  }
  Real elapsed() const {
    return std::chrono::duration<Real>(std::chrono::steady_clock::now() - start)
        .count();
  }
  bool exhausted() const {
    if (step_mode) return step >= step_limit;
    return elapsed() >= seconds_limit;
  }
};

training::FitBudget fit_budget_from(const Budget& b) {
  training::FitBudget fb;
  if (b.step_mode()) {
    fb.max_steps = b.steps;
  } else {
    fb.wall_seconds = b.seconds;
  }
  return fb;
}

}  // namespace

std::string run_result_to_json(const RunResult& r) {
  nlohmann::json j;
  j["second_moment"] = std::vector<Real>(r.second_moment.data(),
                                         r.second_moment.data() + r.second_moment.size());
  j["first_moment"] = std::vector<Real>(r.first_moment.data(),
                                        r.first_moment.data() + r.first_moment.size());
  j["n_steps"] = r.n_steps;
  j["accept_rate_local"] = r.accept_rate_local;
  if (r.accept_rate_jump)
    j["accept_rate_jump"] = *r.accept_rate_jump;
  else
    j["accept_rate_jump"] = nullptr;
  j["warmup_seconds"] = r.warmup_seconds;
  j["sampling_seconds"] = r.sampling_seconds;
  j["divergences"] = r.divergences;
  return j.dump();
}

RunResult run_result_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  RunResult r;
  auto sm = j.at("second_moment").get<std::vector<Real>>();
  auto fm = j.at("first_moment").get<std::vector<Real>>();
  r.second_moment = Eigen::Map<const Vec>(sm.data(), sm.size());
  r.first_moment = Eigen::Map<const Vec>(fm.data(), fm.size());
  r.n_steps = j.at("n_steps").get<long>();
  r.accept_rate_local = j.at("accept_rate_local").get<Real>();
  if (!j.at("accept_rate_jump").is_null())
    r.accept_rate_jump = j.at("accept_rate_jump").get<Real>();
  r.warmup_seconds = j.at("warmup_seconds").get<Real>();
  r.sampling_seconds = j.at("sampling_seconds").get<Real>();
  r.divergences = j.at("divergences").get<long>();
  return r;
}

RunResult run_sampler(const SamplerConfig& config,
                      const targets::TargetDistribution& target,
                      flows::FlowModel* flow, RandomStream root) {
  const std::string& kind = config.kind;
  bool is_known = kind == "mh" || kind == "hmc" || kind == "imh" ||
                  kind == "jump_mh" || kind == "jump_hmc" || kind == "neutra_mh" ||
                  kind == "neutra_hmc";
  if (!is_known) throw SpecError("run_sampler: unknown kind \"" + kind + "\"");
  if (config.needs_flow() && flow == nullptr)
    throw ContractViolation("run_sampler: sampler kind \"" + kind + "\" needs a flow");
  if (!config.needs_flow() && flow != nullptr)
    throw ContractViolation("run_sampler: sampler kind \"" + kind +
                            "\" does not take a flow");
  if (flow != nullptr && flow->dim() != target.dimension)
    throw ContractViolation("run_sampler: flow and target dimensions differ");
  bool jump_kind = kind == "imh" || kind == "jump_mh" || kind == "jump_hmc";
  bool neutra_kind = kind == "neutra_mh" || kind == "neutra_hmc";
  bool gradient_local = kind == "hmc" || kind == "jump_hmc" || kind == "neutra_hmc";
  long jump_interval = kind == "imh" ? 1 : config.jump_interval;
  if (jump_interval < 1) throw ContractViolation("run_sampler: K must be >= 1");

  RunResult result;
  ChainPool pool = ChainPool::create(target.dimension, config.chains, root);
  RandomStream fit_rng = root.child(1000000007ULL);
  RandomStream reservoir_rng = root.child(1000000009ULL);

  bool deterministic_run = config.warmup.step_mode() && config.sampling.step_mode();
  auto warmup_clock = PhaseClock::begin(config.warmup);

  // ---- flow fitting inside the warm-up budget ----
  if (config.needs_flow() && flow->param_count() > 0) {
    flow->set_estimator_probes(config.training_probes);
    Budget svi = config.svi;
    if (!svi.step_mode() && svi.seconds <= 0.0) {
      if (config.warmup.step_mode())
        svi.steps = 2000;
      else
        svi.seconds = config.warmup.seconds * (jump_kind ? 1.0 / 3.0 : 0.5);
    }
    auto fit = training::fit_svi(*flow, target, fit_budget_from(svi), fit_rng,
                                 config.svi_step_size);
    result.svi_best_loss = fit.best_loss;
    result.svi_history = std::move(fit.history);
    result.skipped_training_steps += fit.skipped;
    if (fit.budget_exhausted) result.budget_exhausted_in_warmup = true;
  }

  // ---- warm-up: adapt while sampling ----
  InverseMass mass{Vec::Ones(target.dimension)};
  DualAveragingState da = DualAveragingState::create(
      gradient_local ? 0.1 : 2.38 / std::sqrt(static_cast<Real>(target.dimension)),
      gradient_local ? config.hmc_target_accept : config.mh_target_accept);

  Density local_density;
  std::function<Vec(const Vec&)> moment_transform;  // set for neutra kinds
  RandomStream neutra_rng = root.child(1000000021ULL);
  if (neutra_kind) {
    flow->set_estimator_probes(config.reporting_probes);
    flow->freeze();
    local_density = neutra_density(
        *flow, target, flow->deterministic_logdet() ? nullptr : &neutra_rng);
    const flows::FlowModel* frozen = flow;
    moment_transform = [frozen](const Vec& u) -> Vec {
      return frozen->inverse(u).point;
    };
  } else {
    local_density = plain_density(target);
  }

  // Reservoir of warm-up states for the jump refit.
  Mat reservoir;
  long reservoir_seen = 0;
  if (jump_kind) reservoir.resize(target.dimension, config.reservoir_capacity);

  {
    // In wall-clock mode the fits above already consumed part of the warm-up
    // budget; the shared phase clock accounts for that.
    PhaseClock clock = warmup_clock;
    clock.step_limit = config.warmup.steps;
    long t = 0;
    while (!clock.exhausted()) {
      if (jump_kind && !config.warmup.step_mode() &&
          clock.elapsed() >= config.warmup.seconds * 2.0 / 3.0)
        break;  // leave the rest of the wall budget to the MLE refit
      StepStats stats;
      if (gradient_local)
        stats = hmc_step(pool, local_density, mass, da, config.leapfrog_steps);
      else
        stats = mh_step(pool, local_density, mass, da.step_size());
      result.divergences += stats.divergences;
      dual_averaging_update(da, stats.accept_fraction);
      mass = adapt_inverse_mass(mass, pool, t);
      ++t;
      ++clock.step;
      if (jump_kind) {
        // Per-chain reservoir sampling keeps a deterministic subsample.
        for (int c = 0; c < pool.chains(); ++c) {
          ++reservoir_seen;
          if (reservoir_seen <= config.reservoir_capacity) {
            reservoir.col(reservoir_seen - 1) = pool.states.col(c);
          } else {
            auto j = static_cast<long>(reservoir_rng.uniform01() *
                                       static_cast<Real>(reservoir_seen));
            if (j < config.reservoir_capacity) reservoir.col(j) = pool.states.col(c);
          }
        }
      }
    }
    da.freeze();
    pool.invalidate_cache();
  }

  // ---- jump kinds: refit the flow on warm-up samples ----
  if (jump_kind && flow->param_count() > 0 && reservoir_seen > 0) {
    flow->set_estimator_probes(config.training_probes);
    Budget mle = config.mle;
    if (!mle.step_mode() && mle.seconds <= 0.0) {
      if (config.warmup.step_mode())
        mle.steps = 2000;
      else
        mle.seconds =
            std::max(0.0, config.warmup.seconds - warmup_clock.elapsed());
    }
    long have = std::min<long>(reservoir_seen, config.reservoir_capacity);
    Mat data = reservoir.leftCols(have);
    auto fit = training::fit_mle(*flow, data, fit_budget_from(mle), fit_rng, 0.1,
                                 config.mle_batch);
    result.mle_best_loss = fit.best_loss;
    result.mle_history = std::move(fit.history);
    result.skipped_training_steps += fit.skipped;
    if (fit.budget_exhausted) result.budget_exhausted_in_warmup = true;
  }
  if (config.needs_flow()) {
    flow->set_estimator_probes(config.reporting_probes);
    flow->freeze();
  }
  if (!config.warmup.step_mode()) result.warmup_seconds = warmup_clock.elapsed();

  // ---- sampling ----
  metrics::RunningMoments moments(target.dimension, moment_transform);
  Real local_alpha_sum = 0.0, jump_alpha_sum = 0.0;
  long local_steps = 0, jump_steps = 0;
  pool.invalidate_cache();
  {
    PhaseClock clock = PhaseClock::begin(config.sampling);
    while (!clock.exhausted()) {
      bool do_jump = jump_kind && (clock.step + 1) % jump_interval == 0;
      StepStats stats;
      if (do_jump) {
        stats = jump_step(*flow, local_density, pool);
        jump_alpha_sum += stats.accept_fraction;
        ++jump_steps;
      } else if (gradient_local) {
        stats = hmc_step(pool, local_density, mass, da, config.leapfrog_steps);
        local_alpha_sum += stats.accept_fraction;
        ++local_steps;
      } else {
        stats = mh_step(pool, local_density, mass, da.step_size());
        local_alpha_sum += stats.accept_fraction;
        ++local_steps;
      }
      result.divergences += stats.divergences;
      moments.update(pool.states);
      ++clock.step;
    }
    result.n_steps = clock.step;
    if (!config.sampling.step_mode()) result.sampling_seconds = clock.elapsed();
  }

  result.second_moment = moments.second_moment();
  result.first_moment = moments.first_moment();
  result.dropped_points = moments.dropped();
  result.accept_rate_local =
      local_steps > 0 ? local_alpha_sum / static_cast<Real>(local_steps) : 0.0;
  if (jump_kind)
    result.accept_rate_jump =
        jump_steps > 0 ? jump_alpha_sum / static_cast<Real>(jump_steps) : 0.0;
  if (deterministic_run) {
    result.warmup_seconds = 0.0;
    result.sampling_seconds = 0.0;
  }
  return result;
}

}  // namespace nfbench::samplers
