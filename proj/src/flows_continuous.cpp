#include "nfbench/errors.hpp"
#include "nfbench/flows.hpp"

namespace nfbench::flows {

namespace d = nfbench::diff;

ContinuousFlowLayer::ContinuousFlowLayer(int dim, int width, int depth,
                                         bool time_dependent, OdeSolver solver,
                                         int steps, int probes, Real jac_reg)
    : dim_(dim),
      width_(width),
      depth_(depth),
      time_dependent_(time_dependent),
      solver_(solver),
      steps_(steps),
      probes_(probes),
      jac_reg_(jac_reg) {
  if (steps < 1) throw ContractViolation("continuous: steps must be >= 1");
  allocate_params();
}

std::vector<TensorSpec> ContinuousFlowLayer::param_shapes() const {
  std::vector<TensorSpec> shapes;
  int in = dim_ + (time_dependent_ ? 1 : 0);
  int prev = in;
  for (int l = 0; l < depth_; ++l) {
    shapes.push_back({"w" + std::to_string(l), width_, prev});
    shapes.push_back({"b" + std::to_string(l), width_, 1});
    prev = width_;
  }
  shapes.push_back({"w_out", dim_, prev});
  shapes.push_back({"b_out", dim_, 1});
  return shapes;
}

void ContinuousFlowLayer::init(RandomStream& rng) {
  allocate_params();
  auto shapes = param_shapes();
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i + 2 < shapes.size(); ++i) {
    const auto& s = shapes[i];
    if (s.cols > 1) {
      Real scale = 1.0 / std::sqrt(static_cast<Real>(s.cols));
      for (Eigen::Index k = 0; k < s.size(); ++k)
        params_(offset + k) = rng.normal() * scale;
    }
    offset += s.size();
  }
  // w_out and b_out stay zero: the field vanishes and the flow starts at the
  // identity.
}

namespace {
struct MlpPass {
  d::Var out;
  std::vector<d::Var> hidden;  // tanh outputs per hidden layer
};
}  // namespace

// Forward pass keeping the tanh activations so Jacobian-vector products can
// reuse them.
static MlpPass velocity_pass(RecordContext& ctx, const Layer& layer, int depth,
                             d::Var input) {
  MlpPass pass;
  d::Var h = input;
  for (int l = 0; l < depth; ++l) {
    d::Var w = ctx.params.get(layer, 2 * l);
    d::Var b = ctx.params.get(layer, 2 * l + 1);
    h = d::tanh(d::affine(w, h, b));
    pass.hidden.push_back(h);
  }
  d::Var wout = ctx.params.get(layer, 2 * depth);
  d::Var bout = ctx.params.get(layer, 2 * depth + 1);
  pass.out = d::affine(wout, h, bout);
  return pass;
}

diff::Var ContinuousFlowLayer::velocity(RecordContext& ctx, d::Var z, Real t) const {
  d::Var input =
      time_dependent_ ? d::concat(z, ctx.tape.constant(t)) : z;
  return velocity_pass(ctx, *this, depth_, input).out;
}

diff::Var ContinuousFlowLayer::velocity_jvp(RecordContext& ctx, d::Var z, Real t,
                                            d::Var probe) const {
  d::Var input = time_dependent_ ? d::concat(z, ctx.tape.constant(t)) : z;
  MlpPass pass = velocity_pass(ctx, *this, depth_, input);
  d::Var v = time_dependent_ ? d::concat(probe, ctx.tape.constant(0.0)) : probe;
  for (int l = 0; l < depth_; ++l) {
    d::Var w = ctx.params.get(*this, 2 * l);
    v = (1.0 - d::square(pass.hidden[static_cast<std::size_t>(l)])) * d::matvec(w, v);
  }
  return d::matvec(ctx.params.get(*this, 2 * depth_), v);
}

diff::Var ContinuousFlowLayer::record_integrate(RecordContext& ctx, d::Var z,
                                                Real t_start, Real t_end,
                                                d::Var& log_det,
                                                d::Var* jac_norm) const {
  if (t_start == t_end)
    throw ContractViolation("cnf_integrate: t_start must differ from t_end");
  std::vector<Vec> probes;
  if (probes_ > 0) {
    if (ctx.rng == nullptr)
      throw ContractViolation("continuous: stochastic trace needs a random stream");
    for (int p = 0; p < probes_; ++p) probes.push_back(ctx.rng->normal_vector(dim_));
  }

  // Combined right-hand side in R^(d+1): state velocity and trace estimate
  // (plus the optional squared Jacobian norm).
  auto rhs = [&](d::Var state, Real t) {
    struct Rhs {
      d::Var dz, dld, dfro;
    } r{velocity(ctx, state, t), ctx.tape.constant(0.0), ctx.tape.constant(0.0)};
    if (probes_ == 0) {
      for (int i = 0; i < dim_; ++i) {
        d::Var e = ctx.tape.constant(Vec::Unit(dim_, i));
        d::Var jv = velocity_jvp(ctx, state, t, e);
        r.dld = r.dld + d::slice(jv, i, 1);
        if (jac_norm != nullptr) r.dfro = r.dfro + d::dot(jv, jv);
      }
    } else {
      for (const Vec& w : probes) {
        d::Var wv = ctx.tape.constant(w);
        d::Var jv = velocity_jvp(ctx, state, t, wv);
        r.dld = r.dld + d::dot(wv, jv);
        if (jac_norm != nullptr) r.dfro = r.dfro + d::dot(jv, jv);
      }
      r.dld = r.dld / static_cast<Real>(probes_);
      if (jac_norm != nullptr) r.dfro = r.dfro / static_cast<Real>(probes_);
    }
    return r;
  };

  Real h = (t_end - t_start) / static_cast<Real>(steps_);
  d::Var state = z;
  d::Var ld = ctx.tape.constant(0.0);
  d::Var fro = ctx.tape.constant(0.0);
  for (int k = 0; k < steps_; ++k) {
    Real t = t_start + h * static_cast<Real>(k);
    if (solver_ == OdeSolver::kEuler) {
      auto r = rhs(state, t);
      state = state + h * r.dz;
      ld = ld + h * r.dld;
      if (jac_norm != nullptr) fro = fro + h * r.dfro;
    } else {
      auto k1 = rhs(state, t);
      auto k2 = rhs(state + (0.5 * h) * k1.dz, t + 0.5 * h);
      auto k3 = rhs(state + (0.5 * h) * k2.dz, t + 0.5 * h);
      auto k4 = rhs(state + h * k3.dz, t + h);
      state = state + (h / 6.0) * (k1.dz + 2.0 * k2.dz + 2.0 * k3.dz + k4.dz);
      ld = ld + (h / 6.0) * (k1.dld + 2.0 * k2.dld + 2.0 * k3.dld + k4.dld);
      if (jac_norm != nullptr)
        fro = fro + (h / 6.0) * (k1.dfro + 2.0 * k2.dfro + 2.0 * k3.dfro + k4.dfro);
    }
  }
  log_det = log_det + ld;
  if (jac_norm != nullptr) {
    Real sign = t_end > t_start ? 1.0 : -1.0;
    *jac_norm = *jac_norm + sign * fro;
  }
  return state;
}

diff::Var ContinuousFlowLayer::record_forward(RecordContext& ctx, d::Var x,
                                              d::Var& log_det) const {
  // Latent lives at t = 0, data at t = 1: data to latent integrates backward.
  return record_integrate(ctx, x, 1.0, 0.0, log_det);
}

diff::Var ContinuousFlowLayer::record_inverse(RecordContext& ctx, d::Var z,
                                              d::Var& log_det) const {
  return record_integrate(ctx, z, 0.0, 1.0, log_det);
}

std::pair<Vec, Real> cnf_integrate(const ContinuousFlowLayer& field,
                                   const Vec& z_start, Real t_start, Real t_end,
                                   RandomStream* rng) {
  d::Tape t;
  ParamVars params(t, false);
  RecordContext ctx{t, params, rng, false};
  d::Var ld = t.constant(0.0);
  d::Var out = field.record_integrate(ctx, t.constant(z_start), t_start, t_end, ld);
  return {out.value(), ld.scalar()};
}

}  // namespace nfbench::flows
