#include <algorithm>

#include "nfbench/errors.hpp"
#include "nfbench/flows.hpp"

namespace nfbench::flows {

namespace d = nfbench::diff;

int transformer_param_count(TransformerKind kind) {
  switch (kind) {
    case TransformerKind::kShift: return 1;
    case TransformerKind::kAffine: return 2;
    case TransformerKind::kRqs: return 23;  // 8 widths + 8 heights + 7 derivs
  }
  return 0;
}

// ---- shared tanh MLP ----

// Tensors [W1, b1, ..., Wk, bk] starting at `first_tensor`; tanh between
// affine stages, linear output.
diff::Var record_mlp(RecordContext& ctx, const Layer& layer, int first_tensor,
                     diff::Var input, int n_layers) {
  d::Var h = input;
  for (int l = 0; l < n_layers; ++l) {
    d::Var w = ctx.params.get(layer, first_tensor + 2 * l);
    d::Var b = ctx.params.get(layer, first_tensor + 2 * l + 1);
    h = d::affine(w, h, b);
    if (l + 1 < n_layers) h = d::tanh(h);
  }
  return h;
}

namespace {

// MLP shapes for in -> hidden... -> out.
void append_mlp_shapes(std::vector<TensorSpec>& shapes, int in,
                       const std::vector<int>& hidden, int out) {
  int prev = in;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    shapes.push_back({"w" + std::to_string(l), hidden[l], prev});
    shapes.push_back({"b" + std::to_string(l), hidden[l], 1});
    prev = hidden[l];
  }
  shapes.push_back({"w_out", out, prev});
  shapes.push_back({"b_out", out, 1});
}

// Random hidden weights at 1/sqrt(fan_in), zero final layer: identity init.
void init_mlp_params(Vec& params, const std::vector<TensorSpec>& shapes,
                     std::size_t first, std::size_t count, RandomStream& rng) {
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < first; ++i) offset += shapes[i].size();
  for (std::size_t i = first; i < first + count; ++i) {
    const auto& s = shapes[i];
    bool is_final = i + 2 >= first + count;  // last two tensors are w_out, b_out
    bool is_weight = s.cols > 1;
    if (is_final || !is_weight) {
      params.segment(offset, s.size()).setZero();
    } else {
      Real scale = 1.0 / std::sqrt(static_cast<Real>(s.cols));
      for (Eigen::Index k = 0; k < s.size(); ++k) params(offset + k) = rng.normal() * scale;
    }
    offset += s.size();
  }
}

constexpr Real kMinBinFraction = 1e-3;

}  // namespace

// ---- rational quadratic spline ----

std::pair<diff::Var, diff::Var> record_rqs(d::Tape& t, d::Var knot_params, d::Var u,
                                           bool inverse, Real bound) {
  if (knot_params.size() != 23)
    throw ContractViolation("record_rqs: expected 23 knot parameters");
  Real uval = u.scalar();
  if (std::fabs(uval) >= bound) {
    // Identity tails outside [-bound, bound].
    return {u, t.constant(0.0)};
  }
  const int k_bins = 8;
  d::Var w_raw = d::slice(knot_params, 0, k_bins);
  d::Var h_raw = d::slice(knot_params, k_bins, k_bins);
  d::Var d_raw = d::slice(knot_params, 2 * k_bins, k_bins - 1);

  Real span = 2.0 * bound;
  d::Var widths =
      (kMinBinFraction + (1.0 - k_bins * kMinBinFraction) * d::softmax(w_raw)) * span;
  d::Var heights =
      (kMinBinFraction + (1.0 - k_bins * kMinBinFraction) * d::softmax(h_raw)) * span;
  d::Var xk_tail = d::cumsum(widths) - bound;
  d::Var yk_tail = d::cumsum(heights) - bound;
  d::Var edge = t.constant(-bound);
  d::Var xknots = d::concat(edge, xk_tail);  // 9 knots
  d::Var yknots = d::concat(edge, yk_tail);
  // Boundary derivatives pinned to 1 for the identity tails.
  Real c0 = softplus_inverse(1.0);
  d::Var one = t.constant(1.0);
  std::array<d::Var, 3> dparts{one, d::softplus(d_raw + c0), one};
  d::Var derivs = d::concat(std::span<const d::Var>(dparts));

  const Vec& edges = (inverse ? yknots : xknots).value();
  int bin = 0;
  for (int i = 1; i < k_bins; ++i)
    if (uval >= edges(i)) bin = i;

  d::Var xk = d::slice(xknots, bin, 1);
  d::Var yk = d::slice(yknots, bin, 1);
  d::Var wk = d::slice(widths, bin, 1);
  d::Var hk = d::slice(heights, bin, 1);
  d::Var dk = d::slice(derivs, bin, 1);
  d::Var dk1 = d::slice(derivs, bin + 1, 1);
  d::Var sk = hk / wk;
  d::Var dsum = dk1 + dk - 2.0 * sk;

  auto log_forward_deriv = [&](d::Var xi) {
    d::Var ximx = xi * (1.0 - xi);
    d::Var den = sk + dsum * ximx;
    d::Var num = d::square(sk) *
                 (dk1 * d::square(xi) + 2.0 * sk * ximx + dk * d::square(1.0 - xi));
    return d::log(num) - 2.0 * d::log(den);
  };

  if (!inverse) {
    d::Var xi = (u - xk) / wk;
    d::Var ximx = xi * (1.0 - xi);
    d::Var den = sk + dsum * ximx;
    d::Var y = yk + hk * (sk * d::square(xi) + dk * ximx) / den;
    return {y, log_forward_deriv(xi)};
  }
  d::Var dy = u - yk;
  d::Var a = hk * (sk - dk) + dy * dsum;
  d::Var b = hk * dk - dy * dsum;
  d::Var c = -sk * dy;
  d::Var disc = d::max(d::square(b) - 4.0 * a * c, 0.0);
  d::Var xi = 2.0 * c / (-b - d::sqrt(disc));
  d::Var x = xk + xi * wk;
  return {x, -log_forward_deriv(xi)};
}

SplineResult rational_quadratic_spline(const Vec& knot_params, Real u, bool inverse,
                                       Real bound) {
  d::Tape t;
  ParamVars params(t, false);
  auto [value, logd] =
      record_rqs(t, t.constant(knot_params), t.constant(u), inverse, bound);
  return {value.scalar(), logd.scalar()};
}

// ---- MADE masks ----

std::vector<Mat> made_masks(int dim, const std::vector<int>& hidden_sizes,
                            const std::vector<int>& order) {
  if (dim < 1) throw ContractViolation("made_masks: dim must be >= 1");
  if (static_cast<int>(order.size()) != dim)
    throw ContractViolation("made_masks: order must be a permutation of 0..dim-1");
  std::vector<int> deg_in(dim);
  for (int i = 0; i < dim; ++i) deg_in[i] = order[i] + 1;
  int max_deg = std::max(dim - 1, 1);

  std::vector<Mat> masks;
  std::vector<int> prev_deg = deg_in;
  for (std::size_t l = 0; l < hidden_sizes.size(); ++l) {
    int h = hidden_sizes[l];
    std::vector<int> deg(h);
    for (int k = 0; k < h; ++k) deg[k] = (k % max_deg) + 1;
    Mat m(h, static_cast<Eigen::Index>(prev_deg.size()));
    for (int r = 0; r < h; ++r)
      for (std::size_t c = 0; c < prev_deg.size(); ++c)
        m(r, static_cast<Eigen::Index>(c)) = deg[r] >= prev_deg[c] ? 1.0 : 0.0;
    masks.push_back(std::move(m));
    prev_deg = deg;
  }
  Mat out(dim, static_cast<Eigen::Index>(prev_deg.size()));
  for (int j = 0; j < dim; ++j)
    for (std::size_t c = 0; c < prev_deg.size(); ++c)
      out(j, static_cast<Eigen::Index>(c)) = deg_in[j] > prev_deg[c] ? 1.0 : 0.0;
  masks.push_back(std::move(out));
  return masks;
}

// ---- CouplingLayer ----

CouplingLayer::CouplingLayer(int dim, TransformerKind transformer,
                             std::vector<int> hidden, Real spline_bound)
    : dim_(dim),
      frozen_(dim / 2),
      moved_(dim - dim / 2),
      transformer_(transformer),
      hidden_(std::move(hidden)),
      bound_(spline_bound) {
  if (dim < 2) throw ContractViolation("coupling: dim must be >= 2");
  allocate_params();
}

std::vector<TensorSpec> CouplingLayer::param_shapes() const {
  std::vector<TensorSpec> shapes;
  append_mlp_shapes(shapes, frozen_, hidden_,
                    transformer_param_count(transformer_) * moved_);
  return shapes;
}

void CouplingLayer::init(RandomStream& rng) {
  allocate_params();
  auto shapes = param_shapes();
  init_mlp_params(params_, shapes, 0, shapes.size(), rng);
}

diff::Var CouplingLayer::apply(RecordContext& ctx, d::Var in, d::Var& log_det,
                               bool inverse) const {
  d::Var frozen = d::slice(in, 0, frozen_);
  d::Var moved = d::slice(in, frozen_, moved_);
  d::Var p = record_mlp(ctx, *this, 0, frozen, static_cast<int>(hidden_.size()) + 1);

  d::Var out_moved{};
  switch (transformer_) {
    case TransformerKind::kShift:
      out_moved = inverse ? moved - p : moved + p;
      break;
    case TransformerKind::kAffine: {
      d::Var s = d::slice(p, 0, moved_);
      d::Var shift = d::slice(p, moved_, moved_);
      if (inverse) {
        out_moved = (moved - shift) * d::exp(-s);
        log_det = log_det - d::sum(s);
      } else {
        out_moved = moved * d::exp(s) + shift;
        log_det = log_det + d::sum(s);
      }
      break;
    }
    case TransformerKind::kRqs: {
      std::vector<d::Var> outs;
      for (int j = 0; j < moved_; ++j) {
        d::Var knots = d::slice(p, 23 * j, 23);
        d::Var u = d::slice(moved, j, 1);
        auto [y, logd] = record_rqs(ctx.tape, knots, u, inverse, bound_);
        outs.push_back(y);
        log_det = log_det + logd;
      }
      out_moved = d::concat(outs);
      break;
    }
  }
  return d::concat(frozen, out_moved);
}

diff::Var CouplingLayer::record_forward(RecordContext& ctx, d::Var x,
                                        d::Var& log_det) const {
  return apply(ctx, x, log_det, false);
}

diff::Var CouplingLayer::record_inverse(RecordContext& ctx, d::Var z,
                                        d::Var& log_det) const {
  return apply(ctx, z, log_det, true);
}

// ---- MaskedAutoregressiveInverseLayer ----

MaskedAutoregressiveInverseLayer::MaskedAutoregressiveInverseLayer(
    int dim, TransformerKind transformer, std::vector<int> hidden, Real spline_bound)
    : dim_(dim), transformer_(transformer), hidden_(std::move(hidden)),
      bound_(spline_bound) {
  std::vector<int> order(dim);
  for (int i = 0; i < dim; ++i) order[i] = i;
  masks_ = made_masks(dim, hidden_, order);
  // Replicate the per-coordinate output mask for every transformer parameter.
  Mat out = masks_.back();
  int npc = transformer_param_count(transformer_);
  Mat rep(out.rows() * npc, out.cols());
  for (Eigen::Index j = 0; j < out.rows(); ++j)
    for (int r = 0; r < npc; ++r) rep.row(j * npc + r) = out.row(j);
  masks_.back() = rep;
  allocate_params();
}

std::vector<TensorSpec> MaskedAutoregressiveInverseLayer::param_shapes() const {
  std::vector<TensorSpec> shapes;
  append_mlp_shapes(shapes, dim_, hidden_,
                    transformer_param_count(transformer_) * dim_);
  return shapes;
}

void MaskedAutoregressiveInverseLayer::init(RandomStream& rng) {
  allocate_params();
  auto shapes = param_shapes();
  init_mlp_params(params_, shapes, 0, shapes.size(), rng);
}

diff::Var MaskedAutoregressiveInverseLayer::conditioner(RecordContext& ctx,
                                                        d::Var in) const {
  d::Var h = in;
  int n_layers = static_cast<int>(hidden_.size()) + 1;
  for (int l = 0; l < n_layers; ++l) {
    d::Var w = ctx.params.get(*this, 2 * l);
    d::Var b = ctx.params.get(*this, 2 * l + 1);
    const Mat& mask = masks_[static_cast<std::size_t>(l)];
    Vec mask_flat = Eigen::Map<const Vec>(mask.data(), mask.size());
    d::Var wm = w * ctx.tape.constant(mask_flat);
    h = d::matvec(wm, h, mask.rows(), mask.cols()) + b;
    if (l + 1 < n_layers) h = d::tanh(h);
  }
  return h;
}

diff::Var MaskedAutoregressiveInverseLayer::record_inverse(RecordContext& ctx,
                                                           d::Var z,
                                                           d::Var& log_det) const {
  // One masked pass: coordinate j's parameters depend on z with order < j.
  d::Var p = conditioner(ctx, z);
  switch (transformer_) {
    case TransformerKind::kShift:
      return z + p;
    case TransformerKind::kAffine: {
      Mat gather_s = Mat::Zero(dim_, 2 * dim_), gather_t = Mat::Zero(dim_, 2 * dim_);
      for (int j = 0; j < dim_; ++j) {
        gather_s(j, 2 * j) = 1.0;
        gather_t(j, 2 * j + 1) = 1.0;
      }
      d::Var s = d::matvec(ctx.tape.constant_matrix(gather_s), p);
      d::Var shift = d::matvec(ctx.tape.constant_matrix(gather_t), p);
      log_det = log_det + d::sum(s);
      return z * d::exp(s) + shift;
    }
    case TransformerKind::kRqs: {
      std::vector<d::Var> outs;
      for (int j = 0; j < dim_; ++j) {
        d::Var knots = d::slice(p, 23 * j, 23);
        d::Var u = d::slice(z, j, 1);
        auto [y, logd] = record_rqs(ctx.tape, knots, u, false, bound_);
        outs.push_back(y);
        log_det = log_det + logd;
      }
      return d::concat(outs);
    }
  }
  throw ContractViolation("unreachable");
}

diff::Var MaskedAutoregressiveInverseLayer::record_forward(RecordContext& ctx,
                                                           d::Var x,
                                                           d::Var& log_det) const {
  // Sequential inversion of the one-pass direction: d conditioner passes.
  d::Var z_acc = ctx.tape.constant(Vec::Zero(dim_));
  for (int j = 0; j < dim_; ++j) {
    d::Var p = conditioner(ctx, z_acc);
    d::Var pj = d::slice(p, transformer_param_count(transformer_) * j,
                         transformer_param_count(transformer_));
    d::Var xj = d::slice(x, j, 1);
    d::Var zj{};
    switch (transformer_) {
      case TransformerKind::kShift:
        zj = xj - pj;
        break;
      case TransformerKind::kAffine: {
        d::Var s = d::slice(pj, 0, 1);
        d::Var shift = d::slice(pj, 1, 1);
        zj = (xj - shift) * d::exp(-s);
        log_det = log_det - s;
        break;
      }
      case TransformerKind::kRqs: {
        auto [u, logd] = record_rqs(ctx.tape, pj, xj, true, bound_);
        zj = u;
        log_det = log_det + logd;
        break;
      }
    }
    z_acc = z_acc + d::matvec_t(ctx.tape.selector(j, 1, dim_), zj);
  }
  return z_acc;
}

}  // namespace nfbench::flows
