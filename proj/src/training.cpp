#include "nfbench/training.hpp"

#include <chrono>
#include <fstream>

#include "nfbench/errors.hpp"

namespace nfbench::training {

namespace d = nfbench::diff;

AdamState AdamState::create(Eigen::Index n, Real step_size) {
  AdamState s;
  s.step_size = step_size;
  s.m = Vec::Zero(n);
  s.v = Vec::Zero(n);
  return s;
}

void adam_update(AdamState& adam, const Vec& gradient, Vec& parameters) {
  if (gradient.size() != parameters.size() || adam.m.size() != parameters.size())
    throw ContractViolation("adam_update: size mismatch");
  ++adam.t;
  adam.m = adam.beta1 * adam.m + (1.0 - adam.beta1) * gradient;
  adam.v = adam.beta2 * adam.v +
           (1.0 - adam.beta2) * gradient.array().square().matrix();
  Real c1 = 1.0 - std::pow(adam.beta1, static_cast<Real>(adam.t));
  Real c2 = 1.0 - std::pow(adam.beta2, static_cast<Real>(adam.t));
  parameters -= (adam.step_size * (adam.m / c1).array() /
                 ((adam.v / c2).array().sqrt() + adam.epsilon))
                    .matrix();
}

namespace {

constexpr Real kClipNorm = 10.0;

void clip_gradient(Vec& g) {
  Real n = g.norm();
  if (n > kClipNorm) g *= kClipNorm / n;
}

bool apply_gradient(flows::FlowModel& flow, AdamState& adam, Vec grad, Real loss) {
  if (!std::isfinite(loss) || !grad.allFinite()) return false;
  clip_gradient(grad);
  Vec p = flow.parameters();
  adam_update(adam, grad, p);
  if (!p.allFinite()) return false;
  flow.set_parameters(p);
  return true;
}

}  // namespace

StepOutcome svi_step(flows::FlowModel& flow, const targets::TargetDistribution& target,
                     AdamState& adam, RandomStream& rng) {
  Vec z = rng.normal_vector(flow.dim());
  d::Tape tape;
  Real loss;
  Vec grad;
  try {
    auto rec = flow.record_inverse(tape, tape.constant(z), true, &rng);
    const Vec& x = rec.output.value();
    // loss = log q(x) - log p~(x), with log q(x) = log p_Z(z) - log|det dfinv|.
    Real logq = std_normal_logpdf(z) - rec.log_det.scalar();
    Real logp = targets::log_density(target, x);
    loss = logq - logp;
    Vec seed_x = -targets::grad_log_density(target, x);
    tape.backward({{rec.output, seed_x}, {rec.log_det, -Vec::Ones(1)}});
    grad = flow.parameter_gradient(rec);
  } catch (const Error&) {
    return {std::numeric_limits<Real>::quiet_NaN(), true};
  }
  if (!apply_gradient(flow, adam, std::move(grad), loss)) return {loss, true};
  return {loss, false};
}

StepOutcome mle_step(flows::FlowModel& flow, const Mat& batch, AdamState& adam) {
  if (batch.cols() == 0) throw InputError("mle_step: empty batch");
  Real loss = 0.0;
  Vec grad = Vec::Zero(flow.param_count());
  Real w = 1.0 / static_cast<Real>(batch.cols());
  try {
    for (Eigen::Index j = 0; j < batch.cols(); ++j) {
      d::Tape tape;
      auto rec = flow.record_forward(tape, tape.constant(batch.col(j)), true, nullptr);
      d::Var logq = d::std_normal_logpdf(rec.output) + rec.log_det;
      loss += -w * logq.scalar();
      tape.backward({{logq, -Vec::Constant(1, w)}});
      grad += flow.parameter_gradient(rec);
    }
  } catch (const Error&) {
    return {std::numeric_limits<Real>::quiet_NaN(), true};
  }
  if (!apply_gradient(flow, adam, std::move(grad), loss)) return {loss, true};
  return {loss, false};
}

Real mle_loss(const flows::FlowModel& flow, const Mat& batch, RandomStream* rng) {
  Real loss = 0.0;
  for (Eigen::Index j = 0; j < batch.cols(); ++j)
    loss += -flow.log_density(batch.col(j), rng).value;
  return loss / static_cast<Real>(batch.cols());
}

FitResult fit(flows::FlowModel& flow, Objective objective,
              const targets::TargetDistribution* target, const Mat* data,
              const FitBudget& budget, RandomStream& rng, Real validation_fraction,
              long batch_size, Real step_size) {
  FitResult result;
  if (flow.param_count() == 0) return result;  // nothing to train
  if (objective == Objective::kSvi && target == nullptr)
    throw ContractViolation("fit: SVI needs a target");
  if (objective == Objective::kMle && (data == nullptr || data->cols() == 0))
    throw ContractViolation("fit: MLE needs data");

  // Deterministic shuffle for the train/validation split.
  std::vector<Eigen::Index> train_idx;
  Mat val;
  if (objective == Objective::kMle) {
    Eigen::Index n = data->cols();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (Eigen::Index i = n - 1; i > 0; --i) {
      auto j = static_cast<Eigen::Index>(rng.uniform01() * static_cast<Real>(i + 1));
      if (j > i) j = i;
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    Eigen::Index n_val = 0;
    if (validation_fraction > 0.0) {
      n_val = std::min<Eigen::Index>(
          static_cast<Eigen::Index>(validation_fraction * static_cast<Real>(n)), 1024);
      val.resize(data->rows(), n_val);
      for (Eigen::Index i = 0; i < n_val; ++i)
        val.col(i) = data->col(idx[static_cast<std::size_t>(i)]);
    }
    train_idx.assign(idx.begin() + n_val, idx.end());
    if (train_idx.empty()) throw ContractViolation("fit: no training points left");
  }

  AdamState adam = AdamState::create(flow.param_count(), step_size);
  Vec best_params = flow.parameters();
  long since_best = 0;
  long consecutive_skips = 0;

  // Snapshots follow a held-out loss, never the raw training loss: the
  // single-sample SVI loss is unbounded below on lucky draws, so taking its
  // running minimum would latch onto degenerate scales. For SVI the held-out
  // set is a fixed batch of base-distribution draws; for MLE it is the
  // supplied validation split, or a fixed subsample of the training data.
  const std::uint64_t monitor_seed = rng.next_u64();
  Mat monitor_set;
  if (objective == Objective::kSvi) {
    RandomStream vrng(mix_seed(monitor_seed, 1));
    monitor_set = vrng.normal_matrix(flow.dim(), 128);
  } else if (val.cols() > 0) {
    monitor_set = val;
  } else {
    RandomStream vrng(mix_seed(monitor_seed, 2));
    monitor_set.resize(data->rows(), std::min<Eigen::Index>(
                                         128, static_cast<Eigen::Index>(
                                                  train_idx.size())));
    for (Eigen::Index j = 0; j < monitor_set.cols(); ++j) {
      auto pick = static_cast<std::size_t>(vrng.uniform01() *
                                           static_cast<Real>(train_idx.size()));
      if (pick >= train_idx.size()) pick = train_idx.size() - 1;
      monitor_set.col(j) = data->col(train_idx[pick]);
    }
  }
  const long monitor_interval = 32;
  auto monitor_loss = [&]() -> Real {
    // A fresh stream with a fixed seed keeps stochastic log-det estimates
    // comparable between evaluations.
    RandomStream mrng(mix_seed(monitor_seed, 3));
    try {
      if (objective == Objective::kMle)
        return mle_loss(flow, monitor_set,
                        flow.deterministic_logdet() ? nullptr : &mrng);
      Real total = 0.0;
      for (Eigen::Index j = 0; j < monitor_set.cols(); ++j) {
        Vec z = monitor_set.col(j);
        auto inv = flow.inverse(z, flow.deterministic_logdet() ? nullptr : &mrng);
        total += std_normal_logpdf(z) - inv.log_det -
                 targets::log_density(*target, inv.point);
      }
      return total / static_cast<Real>(monitor_set.cols());
    } catch (const Error&) {
      return std::numeric_limits<Real>::infinity();
    }
  };

  auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<Real>(std::chrono::steady_clock::now() - start)
        .count();
  };

  for (long step = 0;; ++step) {
    if (budget.max_steps >= 0 && step >= budget.max_steps) {
      result.budget_exhausted = true;
      break;
    }
    if (budget.wall_seconds > 0 && elapsed() >= budget.wall_seconds) {
      result.budget_exhausted = true;
      break;
    }
    if (since_best >= budget.patience) break;

    StepOutcome out;
    if (objective == Objective::kSvi) {
      out = svi_step(flow, *target, adam, rng);
    } else {
      Mat batch(data->rows(), std::min<long>(batch_size,
                                             static_cast<long>(train_idx.size())));
      for (Eigen::Index j = 0; j < batch.cols(); ++j) {
        auto pick = static_cast<std::size_t>(rng.uniform01() *
                                             static_cast<Real>(train_idx.size()));
        if (pick >= train_idx.size()) pick = train_idx.size() - 1;
        batch.col(j) = data->col(train_idx[pick]);
      }
      out = mle_step(flow, batch, adam);
    }
    ++result.steps;
    if (out.skipped) {
      ++result.skipped;
      if (++consecutive_skips > 100)
        throw TrainingDiverged("fit: more than 100 consecutive skipped steps");
      continue;
    }
    consecutive_skips = 0;

    if (step % monitor_interval == 0) {
      Real monitored = monitor_loss();
      if (std::isfinite(monitored) && monitored < result.best_loss) {
        result.best_loss = monitored;
        best_params = flow.parameters();
        since_best = 0;
      } else {
        ++since_best;
      }
      result.history.push_back(
          {step, elapsed(), monitored, result.best_loss, result.skipped});
    } else {
      ++since_best;
    }
  }
  flow.set_parameters(best_params);
  return result;
}

FitResult fit_svi(flows::FlowModel& flow, const targets::TargetDistribution& target,
                  const FitBudget& budget, RandomStream& rng, Real step_size) {
  return fit(flow, Objective::kSvi, &target, nullptr, budget, rng, 0.0, 1024,
             step_size);
}

FitResult fit_mle(flows::FlowModel& flow, const Mat& data, const FitBudget& budget,
                  RandomStream& rng, Real validation_fraction, long batch_size) {
  return fit(flow, Objective::kMle, nullptr, &data, budget, rng, validation_fraction,
             batch_size);
}

void write_loss_history_csv(const std::string& path,
                            const std::vector<HistoryRow>& history) {
  std::ofstream out(path);
  if (!out) throw InputError("write_loss_history_csv: cannot open " + path);
  out << "step,wall_seconds,loss,best_loss,skipped\n";
  char buf[160];
  for (const auto& row : history) {
    std::snprintf(buf, sizeof(buf), "%ld,%.6f,%.17g,%.17g,%ld\n", row.step,
                  row.wall_seconds, row.loss, row.best_loss, row.skipped);
    out << buf;
  }
}

}  // namespace nfbench::training
