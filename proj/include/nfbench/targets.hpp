#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>

#include "nfbench/random.hpp"
#include "nfbench/tape.hpp"
#include "nfbench/types.hpp"

namespace nfbench::targets {

struct ReferenceMoments {
  Vec second_moment;  // E[X_d^2]
  Vec variance;       // Var[X_d]
};

/// A benchmark target: unnormalized log density with gradient and, where
/// known, reference moments. Immutable after construction; the callables are
/// pure.
struct TargetDistribution {
  std::string name;
  std::string family;
  int dimension = 0;
  std::function<Real(const Vec&)> log_density_fn;
  std::function<Vec(const Vec&)> grad_fn;
  /// Records the same log density on a tape; the reference oracle for grads.
  std::function<diff::Var(diff::Tape&, diff::Var)> tape_log_density;
  std::optional<ReferenceMoments> reference;
};

Real log_density(const TargetDistribution& target, const Vec& x);
Vec grad_log_density(const TargetDistribution& target, const Vec& x);
/// Throws MomentsUnavailable if the target has no reference moments.
ReferenceMoments reference_moments(const TargetDistribution& target);

/// Q from the QR decomposition of a seeded standard-normal matrix,
/// sign-corrected so that det Q = 1.
Mat random_rotation(int dim, std::uint64_t seed);

enum class GaussianKind { kStandard, kDiagonal, kFullRank, kIllConditioned };

struct GaussianSpec {
  int dimension = 0;
  GaussianKind kind = GaussianKind::kStandard;
  Vec eigenvalues;               // variances along principal axes
  std::uint64_t rotation_seed = 0;
};

struct MixtureSpec {
  Mat component_means;  // components x dimension
  Vec component_stds;   // one std per component (isotropic within component)
  Vec weights;          // sums to 1
};

/// Named columns loaded from a dataset file. Scalar columns live in
/// `columns`; the German credit feature matrix lives in `matrices["x"]`.
struct PosteriorDataset {
  std::string name;
  std::map<std::string, Vec> columns;
  std::map<std::string, Mat> matrices;
};

// ---- direct builders ----
TargetDistribution standard_gaussian(int dim);
TargetDistribution diagonal_gaussian(int dim, const Vec& stds);
TargetDistribution gaussian(const GaussianSpec& spec);
/// Eigenvalue reciprocals from Gamma(0.5, 1); regenerated until the condition
/// number clears 1e3 for the 100-D benchmark configuration.
GaussianSpec ill_conditioned_spec(int dim, std::uint64_t seed);
TargetDistribution ill_conditioned_gaussian(int dim, std::uint64_t seed);
TargetDistribution funnel(int dim);
TargetDistribution rosenbrock(int dim, Real scale);
TargetDistribution gaussian_mixture(const MixtureSpec& spec, const std::string& name);
TargetDistribution mixture3(int dim);
TargetDistribution mixture20(int dim, std::uint64_t seed);
TargetDistribution double_well(int dim);
TargetDistribution eight_schools(const PosteriorDataset& data);
TargetDistribution german_credit(const PosteriorDataset& data, bool sparse);

/// Harness-facing specification of a target.
struct TargetSpec {
  std::string family;
  int dim = 0;
  Real scale = 10.0;               // rosenbrock
  std::uint64_t seed = 0;          // rotations / mixture20 / ill-conditioned
  std::optional<MixtureSpec> mixture;
  std::optional<ReferenceMoments> reference;  // for real-world posteriors
};

TargetDistribution build_target(const TargetSpec& spec,
                                const std::optional<PosteriorDataset>& dataset);

/// Adaptive Simpson quadrature to the requested absolute tolerance.
Real integrate(const std::function<Real(Real)>& f, Real a, Real b, Real tol);

/// E[X^2] of the 1-D double well density exp(-(x^2-4)^2), by quadrature.
Real double_well_second_moment();

}  // namespace nfbench::targets
