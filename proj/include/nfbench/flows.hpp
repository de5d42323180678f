#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nfbench/random.hpp"
#include "nfbench/tape.hpp"
#include "nfbench/types.hpp"

namespace nfbench::flows {

class Layer;
class FlowModel;

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;
  Eigen::Index size() const { return rows * cols; }
};

/// Caches one tape Var per (layer, tensor) during a recording session, so
/// both directions and repeated uses share the same leaves.
class ParamVars {
 public:
  ParamVars(diff::Tape& tape, bool as_inputs) : tape_(tape), as_inputs_(as_inputs) {}
  diff::Var get(const Layer& layer, int tensor_index);
  bool as_inputs() const { return as_inputs_; }
  /// Flat gradient over the whole flow, zero where a tensor was never used.
  Vec flat_gradient(const FlowModel& flow) const;

 private:
  diff::Tape& tape_;
  bool as_inputs_;
  std::map<std::pair<const Layer*, int>, diff::Var> cache_;
};

struct RecordContext {
  diff::Tape& tape;
  ParamVars& params;
  RandomStream* rng = nullptr;
  // When false, layers with iterative inverses may return the solved value
  // without recording the differentiable refinement steps.
  bool gradients = true;
};

struct ForwardResult {
  Vec point;
  Real log_det;
};

/// One bijection. Forward maps data to latent. Parameters are owned by the
/// layer as a flat vector; tape recording is the single source of truth for
/// both values and derivatives.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual int dim() const = 0;
  virtual std::vector<TensorSpec> param_shapes() const = 0;
  virtual void init(RandomStream& rng) = 0;
  virtual bool deterministic_logdet() const { return true; }

  virtual diff::Var record_forward(RecordContext& ctx, diff::Var x,
                                   diff::Var& log_det) const = 0;
  virtual diff::Var record_inverse(RecordContext& ctx, diff::Var z,
                                   diff::Var& log_det) const = 0;

  const Vec& params() const { return params_; }
  void set_params(const Vec& p);
  Eigen::Index param_count() const;
  /// Tensor `i` of the flat parameter vector, shaped per param_shapes().
  Eigen::Map<const Mat> tensor(int i) const;
  virtual void on_params_changed() {}
  virtual void set_probes(int) {}

 protected:
  void allocate_params();
  Vec params_;
};

ForwardResult layer_forward(const Layer& layer, const Vec& x,
                            RandomStream* rng = nullptr);
ForwardResult layer_inverse(const Layer& layer, const Vec& z,
                            RandomStream* rng = nullptr);

// ---------------------------------------------------------------------------
// Layer zoo
// ---------------------------------------------------------------------------

class PermutationLayer : public Layer {
 public:
  PermutationLayer(int dim, std::vector<int> perm);
  static PermutationLayer random(int dim, RandomStream& rng);
  std::string kind() const override { return "permutation"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override { return {}; }
  void init(RandomStream&) override {}
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;
  const std::vector<int>& permutation() const { return perm_; }

 private:
  int dim_;
  std::vector<int> perm_;  // forward: y[i] = x[perm[i]]
  Mat matrix_;
};

/// Fixed affine bijection z = A x + b (not trainable); used for exact
/// whitening preconditioners and linear test flows.
class LinearLayer : public Layer {
 public:
  LinearLayer(const Mat& a, const Vec& b);
  std::string kind() const override { return "linear"; }
  int dim() const override { return static_cast<int>(a_.rows()); }
  std::vector<TensorSpec> param_shapes() const override { return {}; }
  void init(RandomStream&) override {}
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

 private:
  Mat a_, a_inv_;
  Vec b_;
  Real log_det_a_;
};

enum class TransformerKind { kShift, kAffine, kRqs };
int transformer_param_count(TransformerKind kind);

/// Coupling bijection: the first half of the coordinates is frozen and fed
/// to a tanh MLP conditioner that parameterizes an elementwise transformer
/// of the second half.
class CouplingLayer : public Layer {
 public:
  CouplingLayer(int dim, TransformerKind transformer, std::vector<int> hidden,
                Real spline_bound = 10.0);
  std::string kind() const override { return "coupling"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

 private:
  diff::Var apply(RecordContext&, diff::Var in, diff::Var& log_det,
                  bool inverse) const;
  int dim_, frozen_, moved_;
  TransformerKind transformer_;
  std::vector<int> hidden_;
  Real bound_;
};

/// Inverse-autoregressive bijection with a MADE conditioner. The inverse
/// (latent to data) runs in one masked pass; the forward direction solves
/// coordinates sequentially in degree order.
class MaskedAutoregressiveInverseLayer : public Layer {
 public:
  MaskedAutoregressiveInverseLayer(int dim, TransformerKind transformer,
                                   std::vector<int> hidden,
                                   Real spline_bound = 10.0);
  std::string kind() const override { return "masked_autoregressive_inverse"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

 private:
  diff::Var conditioner(RecordContext&, diff::Var in) const;
  int dim_;
  TransformerKind transformer_;
  std::vector<int> hidden_;
  Real bound_;
  std::vector<Mat> masks_;
};

/// Planar residual layer y = x + v sigmoid(w'x + b), with the alignment
/// correction that keeps w'v >= -1 and vanishes at v = 0.
class PlanarLayer : public Layer {
 public:
  explicit PlanarLayer(int dim);
  std::string kind() const override { return "planar"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

 private:
  diff::Var corrected_v(RecordContext&) const;
  int dim_;
};

/// Sylvester residual layer y = x + Q R1 sigmoid(R2 Q'x + b) with m = d/2
/// columns in the fixed orthonormal Q and triangular R factors whose diagonal
/// product is reparameterized to stay above -1.
class SylvesterLayer : public Layer {
 public:
  SylvesterLayer(int dim, int m);
  std::string kind() const override { return "sylvester"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;
  int columns() const { return m_; }

 private:
  struct Pieces;  // R1, R2 and the diagonal product, shared by both directions
  Pieces pieces(RecordContext&) const;
  int dim_, m_;
  Mat q_;
};

/// Radial residual layer y = x + beta (x - x0) / (alpha + |x - x0|) with
/// alpha = softplus(alpha~) and beta = -alpha + softplus(beta~).
class RadialLayer : public Layer {
 public:
  explicit RadialLayer(int dim);
  std::string kind() const override { return "radial"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

 private:
  int dim_;
};

enum class LogDetEstimator { kPowerSeries, kRoulette };

/// Contractive residual layer y = x + g(x) with a spectrally normalized
/// one-hidden-layer tanh network g; log-determinants via the truncated power
/// series or the Russian roulette estimator, inversion by fixed point.
class ContractiveResidualLayer : public Layer {
 public:
  ContractiveResidualLayer(int dim, int hidden, Real coefficient,
                           LogDetEstimator estimator, int series_terms = 30,
                           Real roulette_p = 0.5, int probes = 1);
  std::string kind() const override { return "contractive_residual"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  bool deterministic_logdet() const override { return probes_ == 0; }
  void set_probes(int probes) override { probes_ = probes; }
  void on_params_changed() override;
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

  /// Refresh the persistent power-iteration vectors for both weights.
  void power_iterate(int iterations);
  /// Residual network value with the currently normalized weights.
  Vec residual(const Vec& x) const;
  Real lipschitz_bound() const;
  Real coefficient() const { return coefficient_; }
  LogDetEstimator estimator() const { return estimator_; }
  int series_terms() const { return series_terms_; }
  Real roulette_p() const { return roulette_p_; }

 private:
  struct NormalizedWeights;
  NormalizedWeights normalized(RecordContext&) const;
  int dim_, hidden_;
  Real coefficient_;
  LogDetEstimator estimator_;
  int series_terms_;
  Real roulette_p_;
  int probes_;
  int unroll_;
  Vec u1_, v1_, u2_, v2_;  // persistent power-iteration vectors
};

enum class OdeSolver { kEuler, kRk4 };

/// Continuous flow: data and latent spaces connected by integrating a tanh
/// MLP velocity field; the log-determinant integrates the (estimated) trace
/// of the velocity Jacobian alongside the state.
class ContinuousFlowLayer : public Layer {
 public:
  ContinuousFlowLayer(int dim, int width, int depth, bool time_dependent,
                      OdeSolver solver, int steps, int probes = 1,
                      Real jacobian_regularization = 0.0);
  std::string kind() const override { return "continuous"; }
  int dim() const override { return dim_; }
  std::vector<TensorSpec> param_shapes() const override;
  void init(RandomStream& rng) override;
  bool deterministic_logdet() const override { return probes_ == 0; }
  void set_probes(int probes) override { probes_ = probes; }
  diff::Var record_forward(RecordContext&, diff::Var x, diff::Var&) const override;
  diff::Var record_inverse(RecordContext&, diff::Var z, diff::Var&) const override;

  /// Joint state/log-det integration between arbitrary times. When the
  /// layer's jacobian regularization weight is positive and `jac_norm` is
  /// given, accumulates the Hutchinson estimate of |J|_F^2 there.
  diff::Var record_integrate(RecordContext&, diff::Var z, Real t_start, Real t_end,
                             diff::Var& log_det, diff::Var* jac_norm = nullptr) const;
  Real jacobian_regularization() const { return jac_reg_; }
  OdeSolver solver() const { return solver_; }
  int steps() const { return steps_; }

 private:
  diff::Var velocity(RecordContext&, diff::Var z, Real t) const;
  diff::Var velocity_jvp(RecordContext&, diff::Var z, Real t, diff::Var probe) const;
  int dim_, width_, depth_;
  bool time_dependent_;
  OdeSolver solver_;
  int steps_;
  int probes_;
  Real jac_reg_;
};

// ---------------------------------------------------------------------------
// Flow model
// ---------------------------------------------------------------------------

struct LogDensityResult {
  Real value;
  bool exact;  // false when any layer used a stochastic estimator
};

struct SampleResult {
  Mat points;         // dim x n
  Vec log_densities;  // log q of each draw
};

/// Standard-Gaussian base plus an ordered composition of bijections.
/// Mutable while training; freeze() before handing to samplers.
class FlowModel {
 public:
  FlowModel(int dim, std::vector<std::unique_ptr<Layer>> layers);

  int dim() const { return dim_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }
  Eigen::Index param_count() const;
  Vec parameters() const;
  void set_parameters(const Vec& flat);
  bool deterministic_logdet() const;
  void set_estimator_probes(int probes);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  struct Recording {
    diff::Var output;
    diff::Var log_det;
    std::shared_ptr<ParamVars> params;
  };
  Recording record_forward(diff::Tape& t, diff::Var x, bool params_as_inputs,
                           RandomStream* rng = nullptr, bool gradients = true) const;
  Recording record_inverse(diff::Tape& t, diff::Var z, bool params_as_inputs,
                           RandomStream* rng = nullptr, bool gradients = true) const;
  Vec parameter_gradient(const Recording& rec) const;

  ForwardResult forward(const Vec& x, RandomStream* rng = nullptr) const;
  ForwardResult inverse(const Vec& z, RandomStream* rng = nullptr) const;
  LogDensityResult log_density(const Vec& x, RandomStream* rng = nullptr) const;
  SampleResult sample(RandomStream& rng, long n) const;

 private:
  int dim_;
  std::vector<std::unique_ptr<Layer>> layers_;
  bool frozen_ = false;
};

// Free-function forms of the flow operations.
ForwardResult flow_forward(const FlowModel& flow, const Vec& x,
                           RandomStream* rng = nullptr);
ForwardResult flow_inverse(const FlowModel& flow, const Vec& z,
                           RandomStream* rng = nullptr);
LogDensityResult flow_log_density(const FlowModel& flow, const Vec& x,
                                  RandomStream* rng = nullptr);
SampleResult flow_sample(const FlowModel& flow, RandomStream& rng, long n);

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct FlowHyper {
  int layers = 2;   // 2 | 5 | 10 bijective layers
  int hidden = 10;  // conditioner: (10, 2) or (100, 5)
  int depth = 2;
  int cnf_width = 10;  // velocity net: width 10 | 100, depth 1 | 5 | 10
  int cnf_depth = 1;
  int euler_steps = 150;
  int rk_steps = 100;
  int probes = 1;
  int power_series_terms = 30;
  Real roulette_p = 0.5;
  Real spectral_coefficient = 0.9;
  Real jacobian_regularization = 0.0;
  Real spline_bound = 10.0;
};

/// Architectures: nice, realnvp, c_rq_nsf, iaf, ia_rq_nsf, planar, sylvester,
/// radial, iresnet, resflow, cnf_euler, cnf_rk, identity.
FlowModel build_flow(const std::string& architecture, int dim,
                     const FlowHyper& hyper, std::uint64_t seed);

/// Exact affine preconditioner for N(0, Q diag(eigenvalues) Q'): forward maps
/// data to an exactly standard-Gaussian latent.
FlowModel gaussian_whitening_flow(const Mat& q, const Vec& eigenvalues);
FlowModel identity_flow(int dim);
FlowModel linear_flow(const Mat& a, const Vec& b);

// Checkpoint file: architecture, dim, hyperparameters, flat parameters.
void save_checkpoint(const FlowModel& flow, const std::string& architecture,
                     const FlowHyper& hyper, std::uint64_t seed,
                     const std::string& path);
FlowModel load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Standalone operations
// ---------------------------------------------------------------------------

struct SplineResult {
  Real value;
  Real log_derivative;
};

/// Monotone rational quadratic spline with 8 bins on [-bound, bound] and
/// identity tails. `knot_params` holds 8 unconstrained widths, 8 heights and
/// 7 interior derivatives.
SplineResult rational_quadratic_spline(const Vec& knot_params, Real u, bool inverse,
                                       Real bound = 10.0);

/// Tape-level spline used by the layers; returns (value, log_derivative).
std::pair<diff::Var, diff::Var> record_rqs(diff::Tape& t, diff::Var knot_params,
                                           diff::Var u, bool inverse, Real bound);

/// MADE weight masks: one per hidden layer plus a per-coordinate output mask;
/// output j has zero sensitivity to inputs with order >= j.
std::vector<Mat> made_masks(int dim, const std::vector<int>& hidden_sizes,
                            const std::vector<int>& order);

/// W scaled by min(1, coefficient / sigma1_hat(W)), power iteration from a
/// deterministic start.
Mat spectral_normalize(const Mat& weights, int iterations, Real coefficient);

/// (1/probes) sum_j w_j' (J w_j) with standard-normal probes.
Real hutchinson_trace(const std::function<Vec(const Vec&)>& jacobian_vector,
                      int dim, int probes, RandomStream& rng);

/// Residual map x + g(x) with its closed-form log-determinant, for the
/// planar / sylvester / radial layers.
ForwardResult residual_analytic_apply(const Layer& layer, const Vec& x);

Real contractive_logdet(const ContractiveResidualLayer& layer, const Vec& x,
                        RandomStream& rng);
Vec contractive_inverse(const ContractiveResidualLayer& layer, const Vec& y,
                        Real tolerance, long max_iterations);
std::pair<Vec, Real> cnf_integrate(const ContinuousFlowLayer& field,
                                   const Vec& z_start, Real t_start, Real t_end,
                                   RandomStream* rng);

// Shared internals for layers (tanh MLP recording).
diff::Var record_mlp(RecordContext& ctx, const Layer& layer, int first_tensor,
                     diff::Var input, int n_layers);

}  // namespace nfbench::flows
