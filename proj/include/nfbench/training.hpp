#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nfbench/flows.hpp"
#include "nfbench/targets.hpp"

namespace nfbench::training {

struct AdamState {
  Real step_size = 0.05;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
  Vec m, v;
  long t = 0;
  static AdamState create(Eigen::Index n, Real step_size = 0.05);
};

/// Bias-corrected Adam step applied in place.
void adam_update(AdamState& adam, const Vec& gradient, Vec& parameters);

struct FitBudget {
  Real wall_seconds = 0.0;        // <= 0 means no wall limit
  long max_steps = -1;            // < 0 means no step limit
  long patience = 5000;           // steps without loss improvement
};

struct StepOutcome {
  Real loss = 0.0;
  bool skipped = false;
};

/// One single-sample reverse-KL step: draw z, map through the inverse flow,
/// update parameters toward log p~.
StepOutcome svi_step(flows::FlowModel& flow, const targets::TargetDistribution& target,
                     AdamState& adam, RandomStream& rng);

/// One maximum-likelihood step on a batch of points (dim x n).
StepOutcome mle_step(flows::FlowModel& flow, const Mat& batch, AdamState& adam);

/// Mean negative flow log density of a batch, without touching parameters.
Real mle_loss(const flows::FlowModel& flow, const Mat& batch, RandomStream* rng);

struct HistoryRow {
  long step;
  Real wall_seconds;
  Real loss;
  Real best_loss;
  long skipped;
};

struct FitResult {
  Real best_loss = std::numeric_limits<Real>::infinity();
  long steps = 0;
  long skipped = 0;
  bool budget_exhausted = false;
  std::vector<HistoryRow> history;
};

enum class Objective { kSvi, kMle };

/// Loops the matching step operation until the budget or patience runs out,
/// then restores the best-loss parameter snapshot. For MLE a validation
/// fraction > 0 monitors held-out loss instead of training loss.
FitResult fit(flows::FlowModel& flow, Objective objective,
              const targets::TargetDistribution* target, const Mat* data,
              const FitBudget& budget, RandomStream& rng,
              Real validation_fraction = 0.0, long batch_size = 1024,
              Real step_size = 0.05);

FitResult fit_svi(flows::FlowModel& flow, const targets::TargetDistribution& target,
                  const FitBudget& budget, RandomStream& rng,
                  Real step_size = 0.05);
FitResult fit_mle(flows::FlowModel& flow, const Mat& data, const FitBudget& budget,
                  RandomStream& rng, Real validation_fraction = 0.0,
                  long batch_size = 1024);

void write_loss_history_csv(const std::string& path,
                            const std::vector<HistoryRow>& history);

}  // namespace nfbench::training
