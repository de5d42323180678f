#include <fstream>

#include "json.hpp"
#include "nfbench/errors.hpp"
#include "nfbench/flows.hpp"

namespace nfbench::flows {

namespace d = nfbench::diff;

// ---- Layer base ----

void Layer::allocate_params() {
  Eigen::Index total = 0;
  for (const auto& s : param_shapes()) total += s.size();
  params_ = Vec::Zero(total);
}

Eigen::Index Layer::param_count() const {
  Eigen::Index total = 0;
  for (const auto& s : param_shapes()) total += s.size();
  return total;
}

void Layer::set_params(const Vec& p) {
  if (p.size() != param_count())
    throw ContractViolation(kind() + ": parameter size mismatch");
  params_ = p;
  on_params_changed();
}

Eigen::Map<const Mat> Layer::tensor(int i) const {
  auto shapes = param_shapes();
  Eigen::Index offset = 0;
  for (int k = 0; k < i; ++k) offset += shapes[k].size();
  const auto& s = shapes[i];
  return Eigen::Map<const Mat>(params_.data() + offset, s.rows, s.cols);
}

// ---- ParamVars ----

diff::Var ParamVars::get(const Layer& layer, int tensor_index) {
  auto key = std::make_pair(&layer, tensor_index);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  Eigen::Map<const Mat> value = layer.tensor(tensor_index);
  d::Var v = as_inputs_ ? tape_.input_matrix(value) : tape_.constant_matrix(value);
  cache_.emplace(key, v);
  return v;
}

Vec ParamVars::flat_gradient(const FlowModel& flow) const {
  Vec g = Vec::Zero(flow.param_count());
  Eigen::Index offset = 0;
  for (const auto& layer : flow.layers()) {
    auto shapes = layer->param_shapes();
    for (int i = 0; i < static_cast<int>(shapes.size()); ++i) {
      auto it = cache_.find(std::make_pair(layer.get(), i));
      if (it != cache_.end()) g.segment(offset, shapes[i].size()) = tape_.adjoint(it->second);
      offset += shapes[i].size();
    }
  }
  return g;
}

// ---- eager wrappers ----

namespace {
thread_local d::Tape scratch_tape;
}

ForwardResult layer_forward(const Layer& layer, const Vec& x, RandomStream* rng) {
  d::Tape& t = scratch_tape;
  t.reset();
  ParamVars params(t, false);
  RecordContext ctx{t, params, rng, false};
  d::Var ld = t.constant(0.0);
  d::Var xv = t.constant(x);
  d::Var out = layer.record_forward(ctx, xv, ld);
  return {out.value(), ld.scalar()};
}

ForwardResult layer_inverse(const Layer& layer, const Vec& z, RandomStream* rng) {
  d::Tape& t = scratch_tape;
  t.reset();
  ParamVars params(t, false);
  RecordContext ctx{t, params, rng, false};
  d::Var ld = t.constant(0.0);
  d::Var zv = t.constant(z);
  d::Var out = layer.record_inverse(ctx, zv, ld);
  return {out.value(), ld.scalar()};
}

// ---- PermutationLayer ----

PermutationLayer::PermutationLayer(int dim, std::vector<int> perm)
    : dim_(dim), perm_(std::move(perm)) {
  if (static_cast<int>(perm_.size()) != dim)
    throw ContractViolation("permutation: size mismatch");
  matrix_ = Mat::Zero(dim, dim);
  for (int i = 0; i < dim; ++i) matrix_(i, perm_[i]) = 1.0;
}

PermutationLayer PermutationLayer::random(int dim, RandomStream& rng) {
  std::vector<int> perm(dim);
  for (int i = 0; i < dim; ++i) perm[i] = i;
  for (int i = dim - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform01() * (i + 1));
    if (j > i) j = i;
    std::swap(perm[i], perm[j]);
  }
  return PermutationLayer(dim, perm);
}

diff::Var PermutationLayer::record_forward(RecordContext& ctx, d::Var x,
                                           d::Var&) const {
  return d::matvec(ctx.tape.constant_matrix(matrix_), x);
}

diff::Var PermutationLayer::record_inverse(RecordContext& ctx, d::Var z,
                                           d::Var&) const {
  return d::matvec_t(ctx.tape.constant_matrix(matrix_), z);
}

// ---- LinearLayer ----

LinearLayer::LinearLayer(const Mat& a, const Vec& b) : a_(a), b_(b) {
  if (a.rows() != a.cols() || b.size() != a.rows())
    throw ContractViolation("linear: A must be square and match b");
  Eigen::PartialPivLU<Mat> lu(a);
  a_inv_ = lu.inverse();
  Real det = lu.determinant();
  if (det == 0.0 || !std::isfinite(det))
    throw ContractViolation("linear: A must be invertible");
  log_det_a_ = std::log(std::fabs(det));
}

diff::Var LinearLayer::record_forward(RecordContext& ctx, d::Var x,
                                      d::Var& log_det) const {
  log_det = log_det + log_det_a_;
  return d::affine(ctx.tape.constant_matrix(a_), x, ctx.tape.constant(b_));
}

diff::Var LinearLayer::record_inverse(RecordContext& ctx, d::Var z,
                                      d::Var& log_det) const {
  log_det = log_det - log_det_a_;
  Vec shift = -(a_inv_ * b_);
  return d::affine(ctx.tape.constant_matrix(a_inv_), z, ctx.tape.constant(shift));
}

// ---- FlowModel ----

FlowModel::FlowModel(int dim, std::vector<std::unique_ptr<Layer>> layers)
    : dim_(dim), layers_(std::move(layers)) {
  for (const auto& l : layers_)
    if (l->dim() != dim)
      throw ContractViolation("flow: layer dimension mismatch");
}

Eigen::Index FlowModel::param_count() const {
  Eigen::Index total = 0;
  for (const auto& l : layers_) total += l->param_count();
  return total;
}

Vec FlowModel::parameters() const {
  Vec flat(param_count());
  Eigen::Index offset = 0;
  for (const auto& l : layers_) {
    flat.segment(offset, l->param_count()) = l->params();
    offset += l->param_count();
  }
  return flat;
}

void FlowModel::set_parameters(const Vec& flat) {
  if (flat.size() != param_count())
    throw ContractViolation("flow: parameter vector size mismatch");
  Eigen::Index offset = 0;
  for (const auto& l : layers_) {
    l->set_params(flat.segment(offset, l->param_count()));
    offset += l->param_count();
  }
}

bool FlowModel::deterministic_logdet() const {
  for (const auto& l : layers_)
    if (!l->deterministic_logdet()) return false;
  return true;
}

void FlowModel::set_estimator_probes(int probes) {
  for (const auto& l : layers_) l->set_probes(probes);
}

FlowModel::Recording FlowModel::record_forward(d::Tape& t, d::Var x,
                                               bool params_as_inputs,
                                               RandomStream* rng,
                                               bool gradients) const {
  auto params = std::make_shared<ParamVars>(t, params_as_inputs);
  RecordContext ctx{t, *params, rng, gradients};
  d::Var log_det = t.constant(0.0);
  d::Var cur = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    try {
      cur = layers_[k]->record_forward(ctx, cur, log_det);
    } catch (const NumericalError& e) {
      throw NumericalError("flow_forward at layer " + std::to_string(k) + " (" +
                               layers_[k]->kind() + "): " + e.what(),
                           e.node_index);
    }
  }
  return {cur, log_det, params};
}

FlowModel::Recording FlowModel::record_inverse(d::Tape& t, d::Var z,
                                               bool params_as_inputs,
                                               RandomStream* rng,
                                               bool gradients) const {
  auto params = std::make_shared<ParamVars>(t, params_as_inputs);
  RecordContext ctx{t, *params, rng, gradients};
  d::Var log_det = t.constant(0.0);
  d::Var cur = z;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    try {
      cur = layers_[k]->record_inverse(ctx, cur, log_det);
    } catch (const NumericalError& e) {
      throw NumericalError("flow_inverse at layer " + std::to_string(k) + " (" +
                               layers_[k]->kind() + "): " + e.what(),
                           e.node_index);
    }
  }
  return {cur, log_det, params};
}

Vec FlowModel::parameter_gradient(const Recording& rec) const {
  return rec.params->flat_gradient(*this);
}

ForwardResult FlowModel::forward(const Vec& x, RandomStream* rng) const {
  if (x.size() != dim_) throw InputError("flow_forward: wrong dimension");
  if (!x.allFinite()) throw InputError("flow_forward: non-finite input");
  d::Tape& t = scratch_tape;
  t.reset();
  auto rec = record_forward(t, t.constant(x), false, rng, false);
  return {rec.output.value(), rec.log_det.scalar()};
}

ForwardResult FlowModel::inverse(const Vec& z, RandomStream* rng) const {
  if (z.size() != dim_) throw InputError("flow_inverse: wrong dimension");
  if (!z.allFinite()) throw InputError("flow_inverse: non-finite input");
  d::Tape& t = scratch_tape;
  t.reset();
  auto rec = record_inverse(t, t.constant(z), false, rng, false);
  return {rec.output.value(), rec.log_det.scalar()};
}

LogDensityResult FlowModel::log_density(const Vec& x, RandomStream* rng) const {
  ForwardResult f = forward(x, rng);
  return {std_normal_logpdf(f.point) + f.log_det, deterministic_logdet()};
}

SampleResult FlowModel::sample(RandomStream& rng, long n) const {
  if (n < 1) throw InputError("flow_sample: n must be >= 1");
  SampleResult out;
  out.points.resize(dim_, n);
  out.log_densities.resize(n);
  for (long i = 0; i < n; ++i) {
    Vec z = rng.normal_vector(dim_);
    ForwardResult inv = inverse(z, &rng);
    out.points.col(i) = inv.point;
    // log q(x) = log p_Z(z) + log|det df(x)/dx| = log p_Z(z) - log|det dfinv|.
    out.log_densities(i) = std_normal_logpdf(z) - inv.log_det;
  }
  return out;
}

ForwardResult flow_forward(const FlowModel& flow, const Vec& x, RandomStream* rng) {
  return flow.forward(x, rng);
}
ForwardResult flow_inverse(const FlowModel& flow, const Vec& z, RandomStream* rng) {
  return flow.inverse(z, rng);
}
LogDensityResult flow_log_density(const FlowModel& flow, const Vec& x,
                                  RandomStream* rng) {
  return flow.log_density(x, rng);
}
SampleResult flow_sample(const FlowModel& flow, RandomStream& rng, long n) {
  return flow.sample(rng, n);
}

// ---- construction ----

namespace {

int contractive_width(int dim) {
  int lg = static_cast<int>(std::ceil(std::log10(static_cast<Real>(dim))));
  return 3 * std::max(lg, 4);
}

void check_grid(const FlowHyper& h, bool autoregressive, bool cnf) {
  if (autoregressive || !cnf) {
    if (h.layers != 2 && h.layers != 5 && h.layers != 10)
      throw SpecError("build_flow: layer count must be 2, 5, or 10");
  }
  if (autoregressive) {
    bool small = h.hidden == 10 && h.depth == 2;
    bool large = h.hidden == 100 && h.depth == 5;
    if (!small && !large)
      throw SpecError("build_flow: conditioner must be hidden 10/depth 2 or 100/5");
  }
  if (cnf) {
    if (h.cnf_width != 10 && h.cnf_width != 100)
      throw SpecError("build_flow: velocity width must be 10 or 100");
    if (h.cnf_depth != 1 && h.cnf_depth != 5 && h.cnf_depth != 10)
      throw SpecError("build_flow: velocity depth must be 1, 5, or 10");
  }
}

std::vector<int> inverse_permutation(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<int>(i);
  return inv;
}

}  // namespace

FlowModel build_flow(const std::string& architecture, int dim, const FlowHyper& hyper,
                     std::uint64_t seed) {
  if (dim < 1) throw SpecError("build_flow: dim must be >= 1");
  RandomStream root(mix_seed(seed, std::hash<std::string>{}(architecture)));
  std::vector<std::unique_ptr<Layer>> layers;

  auto autoregressive = [&](TransformerKind tk, bool coupling) {
    check_grid(hyper, true, false);
    if (coupling && dim < 2)
      throw SpecError("build_flow: coupling flows need dim >= 2");
    std::vector<int> hidden(hyper.depth, hyper.hidden);
    std::vector<int> net(dim);
    for (int i = 0; i < dim; ++i) net[i] = i;
    for (int l = 0; l < hyper.layers; ++l) {
      std::unique_ptr<Layer> layer;
      if (coupling)
        layer = std::make_unique<CouplingLayer>(dim, tk, hidden, hyper.spline_bound);
      else
        layer = std::make_unique<MaskedAutoregressiveInverseLayer>(dim, tk, hidden,
                                                                   hyper.spline_bound);
      RandomStream init_rng = root.child(100 + l);
      layer->init(init_rng);
      layers.push_back(std::move(layer));
      if (l + 1 < hyper.layers) {
        RandomStream perm_rng = root.child(200 + l);
        auto perm = PermutationLayer::random(dim, perm_rng);
        const auto& p = perm.permutation();
        std::vector<int> composed(dim);
        for (int i = 0; i < dim; ++i) composed[i] = net[p[i]];
        net = composed;
        layers.push_back(std::make_unique<PermutationLayer>(std::move(perm)));
      }
    }
    // Net permutation cancels at the end, so the initialized flow is the
    // identity map exactly, not just the identity distribution.
    bool trivial = true;
    for (int i = 0; i < dim; ++i) trivial &= net[i] == i;
    if (!trivial)
      layers.push_back(
          std::make_unique<PermutationLayer>(dim, inverse_permutation(net)));
  };

  auto residual_analytic = [&](const std::string& which) {
    check_grid(hyper, false, false);
    for (int l = 0; l < hyper.layers; ++l) {
      std::unique_ptr<Layer> layer;
      if (which == "planar")
        layer = std::make_unique<PlanarLayer>(dim);
      else if (which == "sylvester")
        layer = std::make_unique<SylvesterLayer>(dim, std::max(1, dim / 2));
      else
        layer = std::make_unique<RadialLayer>(dim);
      RandomStream init_rng = root.child(300 + l);
      layer->init(init_rng);
      layers.push_back(std::move(layer));
    }
  };

  auto contractive = [&](LogDetEstimator est) {
    check_grid(hyper, false, false);
    for (int l = 0; l < hyper.layers; ++l) {
      auto layer = std::make_unique<ContractiveResidualLayer>(
          dim, contractive_width(dim), hyper.spectral_coefficient, est,
          hyper.power_series_terms, hyper.roulette_p, hyper.probes);
      RandomStream init_rng = root.child(400 + l);
      layer->init(init_rng);
      layers.push_back(std::move(layer));
    }
  };

  auto continuous = [&](OdeSolver solver, bool time_dependent, int steps) {
    check_grid(hyper, false, true);
    auto layer = std::make_unique<ContinuousFlowLayer>(
        dim, hyper.cnf_width, hyper.cnf_depth, time_dependent, solver, steps,
        hyper.probes, hyper.jacobian_regularization);
    RandomStream init_rng = root.child(500);
    layer->init(init_rng);
    layers.push_back(std::move(layer));
  };

  if (architecture == "nice")
    autoregressive(TransformerKind::kShift, true);
  else if (architecture == "realnvp")
    autoregressive(TransformerKind::kAffine, true);
  else if (architecture == "c_rq_nsf")
    autoregressive(TransformerKind::kRqs, true);
  else if (architecture == "iaf")
    autoregressive(TransformerKind::kAffine, false);
  else if (architecture == "ia_rq_nsf")
    autoregressive(TransformerKind::kRqs, false);
  else if (architecture == "planar" || architecture == "sylvester" ||
           architecture == "radial")
    residual_analytic(architecture);
  else if (architecture == "iresnet")
    contractive(LogDetEstimator::kPowerSeries);
  else if (architecture == "resflow")
    contractive(LogDetEstimator::kRoulette);
  else if (architecture == "cnf_euler")
    continuous(OdeSolver::kEuler, false, hyper.euler_steps);
  else if (architecture == "cnf_rk")
    continuous(OdeSolver::kRk4, true, hyper.rk_steps);
  else if (architecture == "identity")
    ;  // empty composition
  else
    throw SpecError("build_flow: unknown architecture \"" + architecture + "\"");

  return FlowModel(dim, std::move(layers));
}

FlowModel identity_flow(int dim) {
  return FlowModel(dim, {});
}

FlowModel linear_flow(const Mat& a, const Vec& b) {
  std::vector<std::unique_ptr<Layer>> layers;
  layers.push_back(std::make_unique<LinearLayer>(a, b));
  return FlowModel(static_cast<int>(a.rows()), std::move(layers));
}

FlowModel gaussian_whitening_flow(const Mat& q, const Vec& eigenvalues) {
  Mat w = eigenvalues.array().rsqrt().matrix().asDiagonal() * q.transpose();
  return linear_flow(w, Vec::Zero(q.rows()));
}

// ---- checkpoint io ----

namespace {
nlohmann::json hyper_to_json(const FlowHyper& h) {
  return {{"layers", h.layers},
          {"hidden", h.hidden},
          {"depth", h.depth},
          {"cnf_width", h.cnf_width},
          {"cnf_depth", h.cnf_depth},
          {"euler_steps", h.euler_steps},
          {"rk_steps", h.rk_steps},
          {"probes", h.probes},
          {"power_series_terms", h.power_series_terms},
          {"roulette_p", h.roulette_p},
          {"spectral_coefficient", h.spectral_coefficient},
          {"jacobian_regularization", h.jacobian_regularization},
          {"spline_bound", h.spline_bound}};
}

FlowHyper hyper_from_json(const nlohmann::json& j) {
  FlowHyper h;
  h.layers = j.value("layers", h.layers);
  h.hidden = j.value("hidden", h.hidden);
  h.depth = j.value("depth", h.depth);
  h.cnf_width = j.value("cnf_width", h.cnf_width);
  h.cnf_depth = j.value("cnf_depth", h.cnf_depth);
  h.euler_steps = j.value("euler_steps", h.euler_steps);
  h.rk_steps = j.value("rk_steps", h.rk_steps);
  h.probes = j.value("probes", h.probes);
  h.power_series_terms = j.value("power_series_terms", h.power_series_terms);
  h.roulette_p = j.value("roulette_p", h.roulette_p);
  h.spectral_coefficient = j.value("spectral_coefficient", h.spectral_coefficient);
  h.jacobian_regularization =
      j.value("jacobian_regularization", h.jacobian_regularization);
  h.spline_bound = j.value("spline_bound", h.spline_bound);
  return h;
}
}  // namespace

void save_checkpoint(const FlowModel& flow, const std::string& architecture,
                     const FlowHyper& hyper, std::uint64_t seed,
                     const std::string& path) {
  nlohmann::json j;
  j["architecture"] = architecture;
  j["dim"] = flow.dim();
  j["hyperparameters"] = hyper_to_json(hyper);
  j["seed"] = seed;
  Vec p = flow.parameters();
  j["parameters"] = std::vector<Real>(p.data(), p.data() + p.size());
  std::ofstream out(path);
  if (!out) throw InputError("save_checkpoint: cannot open " + path);
  out << j.dump(2) << "\n";
}

FlowModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_checkpoint: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  FlowModel flow = build_flow(j.at("architecture").get<std::string>(),
                              j.at("dim").get<int>(),
                              hyper_from_json(j.at("hyperparameters")),
                              j.at("seed").get<std::uint64_t>());
  auto raw = j.at("parameters").get<std::vector<Real>>();
  flow.set_parameters(Eigen::Map<const Vec>(raw.data(), raw.size()));
  return flow;
}

// ---- standalone helpers ----

Real hutchinson_trace(const std::function<Vec(const Vec&)>& jacobian_vector,
                      int dim, int probes, RandomStream& rng) {
  if (probes < 1) throw ContractViolation("hutchinson_trace: probes must be >= 1");
  Real acc = 0.0;
  for (int j = 0; j < probes; ++j) {
    Vec w = rng.normal_vector(dim);
    acc += w.dot(jacobian_vector(w));
  }
  return acc / probes;
}

ForwardResult residual_analytic_apply(const Layer& layer, const Vec& x) {
  return layer_forward(layer, x, nullptr);
}

}  // namespace nfbench::flows
