#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nfbench/flows.hpp"
#include "nfbench/metrics.hpp"
#include "nfbench/targets.hpp"
#include "nfbench/training.hpp"

namespace nfbench::samplers {

/// Log density with gradient; either a target or its flow-adjusted form.
struct Density {
  int dim = 0;
  std::function<Real(const Vec&)> logp;
  std::function<Vec(const Vec&)> grad;
};

Density plain_density(const targets::TargetDistribution& target);
/// The adjusted density: log p~(u) = log p(f_inv(u)) + log|det df_inv(u)/du|,
/// with the gradient pulled back through the bijection on the tape.
Density neutra_density(const flows::FlowModel& flow,
                       const targets::TargetDistribution& target,
                       RandomStream* rng = nullptr);

std::pair<Real, Vec> neutra_log_density(const flows::FlowModel& flow,
                                        const targets::TargetDistribution& target,
                                        const Vec& x, RandomStream* rng = nullptr);

struct InverseMass {
  Vec diag;  // strictly positive
};

struct DualAveragingState {
  Real mu = std::log(10.0 * 0.1);
  Real log_eps = std::log(0.1);
  Real log_eps_avg = std::log(0.1);
  Real h_bar = 0.0;
  Real target_accept = 0.65;
  Real gamma = 0.05;
  Real t0 = 10.0;
  Real kappa = 0.75;
  long t = 0;
  bool frozen = false;

  static DualAveragingState create(Real initial_step, Real target_accept);
  Real step_size() const { return std::exp(frozen ? log_eps_avg : log_eps); }
  void freeze() { frozen = true; }
};

/// Nesterov dual averaging toward the target acceptance rate.
void dual_averaging_update(DualAveragingState& state, Real observed_accept);

/// Per-chain states (columns) with independent seeded streams.
struct ChainPool {
  Mat states;  // dim x chains
  std::vector<RandomStream> streams;
  Vec cached_logp;  // current log density per chain; empty means stale
  long step_index = 0;

  int dim() const { return static_cast<int>(states.rows()); }
  int chains() const { return static_cast<int>(states.cols()); }
  void invalidate_cache() { cached_logp.resize(0); }
  void ensure_cache(const Density& density);

  static ChainPool create(int dim, int chains, const RandomStream& root);
};

struct StepStats {
  Real accept_fraction = 0.0;  // mean of min(1, alpha) over chains
  long divergences = 0;
  long auto_rejects = 0;
};

bool metropolis_accept(Real log_alpha, RandomStream& rng);

/// Random-walk proposal x + scale * (M^-1 u), u ~ N(0, I); symmetric, so the
/// ratio is the log-density difference.
StepStats mh_step(ChainPool& pool, const Density& density, const InverseMass& mass,
                  Real proposal_scale = 1.0);

/// Leapfrog trajectory (half-kick, drift, half-kick per step); returns false
/// on a non-finite state (divergent trajectory).
bool leapfrog(Vec& x, Vec& r, Real step, int steps, const Density& density,
              const InverseMass& mass);

StepStats hmc_step(ChainPool& pool, const Density& density, const InverseMass& mass,
                   const DualAveragingState& dual_avg, int leapfrog_steps);

/// Independent flow proposal with the two-density Metropolis ratio.
StepStats jump_step(const flows::FlowModel& flow, const Density& density,
                    ChainPool& pool);

/// M^-1 += sqrt(cross-chain variance) * 0.999^t (elementwise), entries kept
/// at or above 1e-8. Needs at least two chains.
InverseMass adapt_inverse_mass(const InverseMass& current, const ChainPool& pool,
                               long t);

struct Budget {
  Real seconds = 0.0;
  long steps = -1;  // >= 0 selects the deterministic step-counted mode
  bool step_mode() const { return steps >= 0; }
};

struct SamplerConfig {
  std::string kind = "mh";  // mh hmc imh jump_mh jump_hmc neutra_mh neutra_hmc
  int chains = 100;
  int leapfrog_steps = 10;
  long jump_interval = 25;  // K
  Budget warmup;
  Budget sampling;
  Budget svi;  // sub-budgets inside warm-up; negative steps = derive defaults
  Budget mle;
  Real mh_target_accept = 0.234;
  Real hmc_target_accept = 0.65;
  Real svi_step_size = 0.05;
  Real mle_step_size = 0.05;
  long mle_batch = 1024;
  int training_probes = 1;
  int reporting_probes = 20;
  long reservoir_capacity = 65536;

  bool needs_flow() const { return kind != "mh" && kind != "hmc"; }
  bool uses_gradient() const {
    return kind == "hmc" || kind == "jump_hmc" || kind == "neutra_hmc";
  }
};

struct RunResult {
  Vec second_moment;
  Vec first_moment;
  long n_steps = 0;
  Real accept_rate_local = 0.0;
  std::optional<Real> accept_rate_jump;
  Real warmup_seconds = 0.0;
  Real sampling_seconds = 0.0;
  long divergences = 0;
  // diagnostics beyond the serialized interface
  long dropped_points = 0;
  long skipped_training_steps = 0;
  bool budget_exhausted_in_warmup = false;
  Real svi_best_loss = std::numeric_limits<Real>::quiet_NaN();
  Real mle_best_loss = std::numeric_limits<Real>::quiet_NaN();
  std::vector<training::HistoryRow> svi_history;
  std::vector<training::HistoryRow> mle_history;
};

std::string run_result_to_json(const RunResult& result);
RunResult run_result_from_json(const std::string& text);

/// Executes the kind-specific schedule: adaptation warm-up, flow fits where
/// the sampler uses one, then budgeted sampling with running moments.
RunResult run_sampler(const SamplerConfig& config,
                      const targets::TargetDistribution& target,
                      flows::FlowModel* flow, RandomStream root);

}  // namespace nfbench::samplers
