#include "nfbench/targets.hpp"

#include <cmath>

#include "nfbench/errors.hpp"

namespace nfbench::targets {

namespace d = nfbench::diff;

namespace {

void check_point(const TargetDistribution& t, const Vec& x) {
  if (x.size() != t.dimension)
    throw InputError(t.name + ": point has size " + std::to_string(x.size()) +
                     ", expected " + std::to_string(t.dimension));
  if (!x.allFinite()) throw InputError(t.name + ": non-finite input point");
}

Real gaussian_logpdf(Real x, Real mean, Real std) {
  Real z = (x - mean) / std;
  return -0.5 * z * z - std::log(std) - 0.5 * kLog2Pi;
}

// Selector picking a strided set of coordinates (constant gather matrix).
Mat gather_matrix(const std::vector<Eigen::Index>& rows, Eigen::Index size) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(rows.size()), size);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows.size()); ++i)
    m(i, rows[static_cast<std::size_t>(i)]) = 1.0;
  return m;
}

}  // namespace

Real log_density(const TargetDistribution& t, const Vec& x) {
  check_point(t, x);
  return t.log_density_fn(x);
}

Vec grad_log_density(const TargetDistribution& t, const Vec& x) {
  check_point(t, x);
  return t.grad_fn(x);
}

ReferenceMoments reference_moments(const TargetDistribution& t) {
  if (!t.reference)
    throw MomentsUnavailable(t.name + ": no analytic moments and no reference file");
  return *t.reference;
}

Mat random_rotation(int dim, std::uint64_t seed) {
  RandomStream rng(mix_seed(seed, 0x726f74ULL));
  Mat a = rng.normal_matrix(dim, dim);
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ();
  Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < dim; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  // The sign correction leaves det Q = sign(det A); flip one axis if needed.
  if (q.determinant() < 0) q.col(dim - 1) = -q.col(dim - 1);
  return q;
}

// ---- Gaussians ----

TargetDistribution standard_gaussian(int dim) {
  TargetDistribution t;
  t.name = "standard_gaussian_" + std::to_string(dim) + "d";
  t.family = "gaussian";
  t.dimension = dim;
  t.log_density_fn = [](const Vec& x) { return std_normal_logpdf(x); };
  t.grad_fn = [](const Vec& x) -> Vec { return -x; };
  t.tape_log_density = [](d::Tape&, d::Var x) { return d::std_normal_logpdf(x); };
  t.reference = ReferenceMoments{Vec::Ones(dim), Vec::Ones(dim)};
  return t;
}

TargetDistribution diagonal_gaussian(int dim, const Vec& stds) {
  if (stds.size() != dim || (stds.array() <= 0).any())
    throw SpecError("diagonal_gaussian: needs " + std::to_string(dim) +
                    " positive stds");
  Vec var = stds.array().square();
  Vec inv_var = var.cwiseInverse();
  Real log_norm = -0.5 * dim * kLog2Pi - stds.array().log().sum();
  TargetDistribution t;
  t.name = "diagonal_gaussian_" + std::to_string(dim) + "d";
  t.family = "gaussian";
  t.dimension = dim;
  t.log_density_fn = [inv_var, log_norm](const Vec& x) {
    return -0.5 * (x.array().square() * inv_var.array()).sum() + log_norm;
  };
  t.grad_fn = [inv_var](const Vec& x) -> Vec { return -x.cwiseProduct(inv_var); };
  t.tape_log_density = [inv_var, log_norm](d::Tape& tape, d::Var x) {
    d::Var iv = tape.constant(inv_var);
    return -0.5 * d::sum(d::square(x) * iv) + log_norm;
  };
  t.reference = ReferenceMoments{var, var};
  return t;
}

TargetDistribution gaussian(const GaussianSpec& spec) {
  int dim = spec.dimension;
  switch (spec.kind) {
    case GaussianKind::kStandard:
      return standard_gaussian(dim);
    case GaussianKind::kDiagonal:
      return diagonal_gaussian(dim, spec.eigenvalues.array().sqrt());
    default:
      break;
  }
  if (spec.eigenvalues.size() != dim || (spec.eigenvalues.array() <= 0).any())
    throw SpecError("gaussian: needs positive eigenvalues");
  Mat q = random_rotation(dim, spec.rotation_seed);
  Vec lambda = spec.eigenvalues;
  Vec inv_lambda = lambda.cwiseInverse();
  Mat cov = q * lambda.asDiagonal() * q.transpose();
  Real log_norm = -0.5 * dim * kLog2Pi - 0.5 * lambda.array().log().sum();
  TargetDistribution t;
  t.name = (spec.kind == GaussianKind::kFullRank ? "full_rank_gaussian_"
                                                 : "ill_conditioned_gaussian_") +
           std::to_string(dim) + "d";
  t.family = "gaussian";
  t.dimension = dim;
  t.log_density_fn = [q, inv_lambda, log_norm](const Vec& x) {
    Vec y = q.transpose() * x;
    return -0.5 * (y.array().square() * inv_lambda.array()).sum() + log_norm;
  };
  t.grad_fn = [q, inv_lambda](const Vec& x) -> Vec {
    Vec y = q.transpose() * x;
    return -(q * y.cwiseProduct(inv_lambda).eval());
  };
  t.tape_log_density = [q, inv_lambda, log_norm](d::Tape& tape, d::Var x) {
    d::Var qt = tape.constant_matrix(q);
    d::Var y = d::matvec_t(qt, x);
    return -0.5 * d::sum(d::square(y) * tape.constant(inv_lambda)) + log_norm;
  };
  t.reference = ReferenceMoments{cov.diagonal(), cov.diagonal()};
  return t;
}

GaussianSpec ill_conditioned_spec(int dim, std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    RandomStream rng(mix_seed(seed, 0x111ULL + attempt));
    Vec lambda(dim);
    for (int i = 0; i < dim; ++i) {
      Real r = rng.gamma_half();
      while (r <= 0) r = rng.gamma_half();
      lambda(i) = 1.0 / r;
    }
    Real cond = lambda.maxCoeff() / lambda.minCoeff();
    if (dim >= 100 && cond <= 1e3) continue;
    GaussianSpec spec;
    spec.dimension = dim;
    spec.kind = GaussianKind::kIllConditioned;
    spec.eigenvalues = lambda;
    spec.rotation_seed = mix_seed(seed, 0x222ULL);
    return spec;
  }
}

TargetDistribution ill_conditioned_gaussian(int dim, std::uint64_t seed) {
  return gaussian(ill_conditioned_spec(dim, seed));
}

// ---- Funnel ----

TargetDistribution funnel(int dim) {
  if (dim < 2) throw SpecError("funnel: dim must be >= 2");
  TargetDistribution t;
  t.name = "funnel_" + std::to_string(dim) + "d";
  t.family = "non_gaussian";
  t.dimension = dim;
  // x1 ~ N(0, 3); x_i | x1 ~ N(0, exp(x1/2)), both std parameterized.
  t.log_density_fn = [dim](const Vec& x) {
    Real x1 = x(0);
    Real rest_sq = x.tail(x.size() - 1).squaredNorm();
    Real lp = -0.5 * x1 * x1 / 9.0 - std::log(3.0) - 0.5 * kLog2Pi;
    lp += -0.5 * rest_sq * std::exp(-x1) -
          0.5 * (dim - 1) * (kLog2Pi + x1);
    return lp;
  };
  t.grad_fn = [dim](const Vec& x) -> Vec {
    Real x1 = x(0);
    Real e = std::exp(-x1);
    Vec g(x.size());
    g(0) = -x1 / 9.0 + 0.5 * e * x.tail(x.size() - 1).squaredNorm() -
           0.5 * (dim - 1);
    g.tail(x.size() - 1) = -x.tail(x.size() - 1) * e;
    return g;
  };
  t.tape_log_density = [dim](d::Tape&, d::Var x) {
    d::Var x1 = d::slice(x, 0, 1);
    d::Var rest = d::slice(x, 1, dim - 1);
    d::Var lp = -0.5 / 9.0 * d::square(x1) - (std::log(3.0) + 0.5 * kLog2Pi);
    lp = lp + -0.5 * d::dot(rest, rest) * d::exp(-x1) -
         0.5 * (dim - 1) * (x1 + kLog2Pi);
    return lp;
  };
  Real e45 = std::exp(4.5);  // E[exp(x1)] for x1 ~ N(0, 9)
  Vec m2 = Vec::Constant(dim, e45);
  m2(0) = 9.0;
  t.reference = ReferenceMoments{m2, m2};
  return t;
}

// ---- Rosenbrock ----

TargetDistribution rosenbrock(int dim, Real scale) {
  if (dim % 2 != 0 || dim < 2)
    throw SpecError("rosenbrock: dimension must be even and >= 2");
  if (!(scale > 0)) throw SpecError("rosenbrock: scale must be > 0");
  TargetDistribution t;
  t.name = "rosenbrock_" + std::to_string(dim) + "d";
  t.family = "non_gaussian";
  t.dimension = dim;
  t.log_density_fn = [scale](const Vec& x) {
    Real lp = 0.0;
    for (Eigen::Index k = 0; k + 1 < x.size(); k += 2) {
      Real a = x(k) * x(k) - x(k + 1);
      Real b = x(k) - 1.0;
      lp -= scale * a * a + b * b;
    }
    return lp;
  };
  t.grad_fn = [scale](const Vec& x) -> Vec {
    Vec g(x.size());
    for (Eigen::Index k = 0; k + 1 < x.size(); k += 2) {
      Real a = x(k) * x(k) - x(k + 1);
      g(k) = -4.0 * scale * x(k) * a - 2.0 * (x(k) - 1.0);
      g(k + 1) = 2.0 * scale * a;
    }
    return g;
  };
  std::vector<Eigen::Index> odd, even;
  for (Eigen::Index k = 0; k < dim; k += 2) {
    odd.push_back(k);
    even.push_back(k + 1);
  }
  Mat godd = gather_matrix(odd, dim), geven = gather_matrix(even, dim);
  t.tape_log_density = [godd, geven, scale](d::Tape& tape, d::Var x) {
    d::Var xo = d::matvec(tape.constant_matrix(godd), x);
    d::Var xe = d::matvec(tape.constant_matrix(geven), x);
    d::Var a = d::square(xo) - xe;
    d::Var b = xo - 1.0;
    return -(scale * d::sum(d::square(a)) + d::sum(d::square(b)));
  };
  // Pairs are independent: x_odd ~ N(1, 1/2), x_even | x_odd ~ N(x_odd^2, 1/(2s)).
  Real m2_odd = 1.0 + 0.5;
  Real m4_odd = 1.0 + 6.0 * 0.5 + 3.0 * 0.25;  // E[X^4], X ~ N(1, 1/2)
  Real m2_even = m4_odd + 0.5 / scale;
  Real mean_even = m2_odd;
  Vec m2(dim), var(dim);
  for (Eigen::Index k = 0; k < dim; k += 2) {
    m2(k) = m2_odd;
    var(k) = 0.5;
    m2(k + 1) = m2_even;
    var(k + 1) = m2_even - mean_even * mean_even;
  }
  t.reference = ReferenceMoments{m2, var};
  return t;
}

// ---- Mixtures ----

TargetDistribution gaussian_mixture(const MixtureSpec& spec, const std::string& name) {
  Eigen::Index n_comp = spec.component_means.rows();
  Eigen::Index dim = spec.component_means.cols();
  if (spec.weights.size() != n_comp || spec.component_stds.size() != n_comp)
    throw SpecError("gaussian_mixture: inconsistent component counts");
  if ((spec.weights.array() < 0).any() ||
      std::fabs(spec.weights.sum() - 1.0) > 1e-12)
    throw SpecError("gaussian_mixture: weights must be nonnegative and sum to 1");
  if ((spec.component_stds.array() <= 0).any())
    throw SpecError("gaussian_mixture: stds must be positive");

  Mat means = spec.component_means;
  Vec stds = spec.component_stds;
  Vec logw = spec.weights.array().max(1e-300).log();
  Vec log_norm(n_comp);
  for (Eigen::Index c = 0; c < n_comp; ++c)
    log_norm(c) = -0.5 * dim * kLog2Pi - dim * std::log(stds(c));

  auto comp_logs = [means, stds, logw, log_norm](const Vec& x) -> Vec {
    Vec lp(means.rows());
    for (Eigen::Index c = 0; c < means.rows(); ++c) {
      Real q = (x - means.row(c).transpose()).squaredNorm() / (stds(c) * stds(c));
      lp(c) = logw(c) + log_norm(c) - 0.5 * q;
    }
    return lp;
  };

  TargetDistribution t;
  t.name = name;
  t.family = "multimodal";
  t.dimension = static_cast<int>(dim);
  t.log_density_fn = [comp_logs](const Vec& x) { return log_sum_exp(comp_logs(x)); };
  t.grad_fn = [comp_logs, means, stds](const Vec& x) -> Vec {
    Vec lp = comp_logs(x);
    Real m = lp.maxCoeff();
    Vec w = (lp.array() - m).exp();
    w /= w.sum();
    Vec g = Vec::Zero(x.size());
    for (Eigen::Index c = 0; c < means.rows(); ++c)
      g -= w(c) / (stds(c) * stds(c)) * (x - means.row(c).transpose());
    return g;
  };
  t.tape_log_density = [means, stds, logw, log_norm](d::Tape& tape, d::Var x) {
    std::vector<d::Var> lps;
    for (Eigen::Index c = 0; c < means.rows(); ++c) {
      d::Var delta = x - tape.constant(means.row(c).transpose());
      d::Var q = d::dot(delta, delta) * (1.0 / (stds(c) * stds(c)));
      lps.push_back(-0.5 * q + (logw(c) + log_norm(c)));
    }
    return d::logsumexp(d::concat(lps));
  };
  Vec mean_mix = Vec::Zero(dim), m2 = Vec::Zero(dim);
  for (Eigen::Index c = 0; c < n_comp; ++c) {
    mean_mix += spec.weights(c) * means.row(c).transpose();
    m2 += spec.weights(c) *
          (means.row(c).transpose().array().square() + stds(c) * stds(c)).matrix();
  }
  t.reference = ReferenceMoments{m2, m2 - mean_mix.array().square().matrix()};
  return t;
}

TargetDistribution mixture3(int dim) {
  MixtureSpec spec;
  spec.component_means = Mat(3, dim);
  spec.component_means.row(0).setConstant(-5.0);
  spec.component_means.row(1).setConstant(0.0);
  spec.component_means.row(2).setConstant(5.0);
  spec.component_stds = Vec::Constant(3, 0.7);
  spec.weights = Vec::Constant(3, 1.0 / 3.0);
  return gaussian_mixture(spec, "mixture3_" + std::to_string(dim) + "d");
}

TargetDistribution mixture20(int dim, std::uint64_t seed) {
  RandomStream rng(mix_seed(seed, 0x20ULL));
  MixtureSpec spec;
  spec.component_means = rng.normal_matrix(20, dim) * 10.0;
  spec.component_stds = Vec::Ones(20);
  Vec u = rng.normal_vector(20);
  Vec w = (u.array() - u.maxCoeff()).exp();
  spec.weights = w / w.sum();
  return gaussian_mixture(spec, "mixture20_" + std::to_string(dim) + "d");
}

// ---- Double well ----

TargetDistribution double_well(int dim) {
  TargetDistribution t;
  t.name = "double_well_" + std::to_string(dim) + "d";
  t.family = "multimodal";
  t.dimension = dim;
  t.log_density_fn = [](const Vec& x) {
    return -(x.array().square() - 4.0).square().sum();
  };
  t.grad_fn = [](const Vec& x) -> Vec {
    return (-4.0 * x.array() * (x.array().square() - 4.0)).matrix();
  };
  t.tape_log_density = [](d::Tape&, d::Var x) {
    return -d::sum(d::square(d::square(x) - 4.0));
  };
  Real m2 = double_well_second_moment();
  t.reference = ReferenceMoments{Vec::Constant(dim, m2), Vec::Constant(dim, m2)};
  return t;
}

// ---- Eight schools ----

TargetDistribution eight_schools(const PosteriorDataset& data) {
  auto yit = data.columns.find("y");
  auto sit = data.columns.find("sigma");
  if (yit == data.columns.end() || sit == data.columns.end())
    throw DataError("eight_schools: dataset needs columns \"y\" and \"sigma\"");
  Vec y = yit->second, sigma = sit->second;
  if (y.size() != 8 || sigma.size() != 8)
    throw DataError("eight_schools: y and sigma must each have 8 rows");
  if ((sigma.array() <= 0).any())
    throw DataError("eight_schools: sigma must be positive");
  Vec inv_s2 = sigma.array().square().inverse();
  Real log_norm_y = -sigma.array().log().sum() - 4.0 * kLog2Pi;

  TargetDistribution t;
  t.name = "eight_schools";
  t.family = "real_world";
  t.dimension = 10;  // (mu, tau_tilde, theta'_1..8)
  t.log_density_fn = [y, sigma, inv_s2, log_norm_y](const Vec& p) {
    Real mu = p(0), tt = p(1);
    Real tau = softplus(tt);
    Real s = sigmoid(tt);
    Vec theta = mu + tau * p.tail(8).array();
    Real lp = gaussian_logpdf(mu, 0.0, 10.0);
    Real lt = std::log(tau);
    lp += -lt - 0.5 * (lt - 5.0) * (lt - 5.0) - 0.5 * kLog2Pi;  // LogNormal(5,1)
    lp += std::log(s);                                          // softplus jacobian
    lp += -0.5 * p.tail(8).squaredNorm() - 4.0 * kLog2Pi;
    lp += -0.5 * ((y.array() - theta.array()).square() * inv_s2.array()).sum() +
          log_norm_y;
    return lp;
  };
  t.grad_fn = [y, inv_s2](const Vec& p) -> Vec {
    Real mu = p(0), tt = p(1);
    Real tau = softplus(tt);
    Real s = sigmoid(tt);
    Vec thp = p.tail(8);
    Vec theta = mu + tau * thp.array();
    Vec r = (y - theta).cwiseProduct(inv_s2);
    Vec g(10);
    g(0) = -mu / 100.0 + r.sum();
    Real lt = std::log(tau);
    Real dlp_dtau = (-1.0 - (lt - 5.0)) / tau + thp.dot(r);
    g(1) = dlp_dtau * s + (1.0 - s);
    g.tail(8) = -thp + tau * r;
    return g;
  };
  t.tape_log_density = [y, sigma, inv_s2, log_norm_y](d::Tape& tape, d::Var p) {
    d::Var mu = d::slice(p, 0, 1);
    d::Var tt = d::slice(p, 1, 1);
    d::Var thp = d::slice(p, 2, 8);
    d::Var tau = d::softplus(tt);
    d::Var theta = mu + tau * thp;
    d::Var lt = d::log(tau);
    d::Var lp = -0.5 / 100.0 * d::square(mu) - (std::log(10.0) + 0.5 * kLog2Pi);
    lp = lp + (-lt - 0.5 * d::square(lt - 5.0) - 0.5 * kLog2Pi);
    lp = lp + d::log(d::sigmoid(tt));
    lp = lp + (-0.5 * d::dot(thp, thp) - 4.0 * kLog2Pi);
    d::Var resid = tape.constant(y) - theta;
    lp = lp + (-0.5 * d::sum(d::square(resid) * tape.constant(inv_s2)) + log_norm_y);
    return lp;
  };
  return t;
}

// ---- German credit ----

TargetDistribution german_credit(const PosteriorDataset& data, bool sparse) {
  auto xit = data.matrices.find("x");
  auto yit = data.columns.find("y");
  if (xit == data.matrices.end() || yit == data.columns.end())
    throw DataError("german_credit: dataset needs matrix \"x\" and column \"y\"");
  Mat x = xit->second;
  Vec y = yit->second;
  if (x.cols() != 25)
    throw DataError("german_credit: feature matrix must have 25 columns");
  if (y.size() != x.rows())
    throw DataError("german_credit: x and y row counts differ");
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y(i) != 0.0 && y(i) != 1.0)
      throw DataError("german_credit: labels must be 0/1");

  const int k = 25;
  int dim = sparse ? 1 + 2 * k : 1 + k;
  // Gamma(0.5, 0.5) in shape-rate form.
  auto gamma_logpdf = [](Real v) {
    return 0.5 * std::log(0.5) - std::lgamma(0.5) - 0.5 * std::log(v) - 0.5 * v;
  };
  auto dgamma_dv = [](Real v) { return -0.5 / v - 0.5; };

  TargetDistribution t;
  t.name = sparse ? "sparse_german_credit" : "german_credit";
  t.family = "real_world";
  t.dimension = dim;
  t.log_density_fn = [x, y, sparse, gamma_logpdf](const Vec& p) {
    Real tau = softplus(p(0));
    Real lp = gamma_logpdf(tau) + std::log(sigmoid(p(0)));
    Vec beta, w;
    if (sparse) {
      Vec lt = p.segment(1, 25);
      beta = p.segment(26, 25);
      Vec lambda(25);
      for (int i = 0; i < 25; ++i) {
        lambda(i) = softplus(lt(i));
        lp += gamma_logpdf(lambda(i)) + std::log(sigmoid(lt(i)));
      }
      w = beta.cwiseProduct(lambda);
    } else {
      beta = p.segment(1, 25);
      w = beta;
    }
    lp += -0.5 * beta.squaredNorm() - 0.5 * beta.size() * kLog2Pi;
    Vec logits = tau * (x * w);
    for (Eigen::Index j = 0; j < y.size(); ++j)
      lp += y(j) * logits(j) - softplus(logits(j));
    return lp;
  };
  t.grad_fn = [x, y, sparse, dgamma_dv](const Vec& p) -> Vec {
    Real tau = softplus(p(0));
    Real s0 = sigmoid(p(0));
    Vec beta, lambda, lt;
    if (sparse) {
      lt = p.segment(1, 25);
      lambda = lt.unaryExpr([](Real v) { return softplus(v); });
      beta = p.segment(26, 25);
    } else {
      beta = p.segment(1, 25);
      lambda = Vec::Ones(25);
    }
    Vec w = beta.cwiseProduct(lambda);
    Vec u = x * w;
    Vec e(y.size());
    for (Eigen::Index j = 0; j < y.size(); ++j)
      e(j) = y(j) - sigmoid(tau * u(j));
    Vec xe = x.transpose() * e;  // sum_j e_j x_j
    Vec g(p.size());
    g(0) = (dgamma_dv(tau) + e.dot(u)) * s0 + (1.0 - s0);
    if (sparse) {
      for (int i = 0; i < 25; ++i) {
        Real si = sigmoid(lt(i));
        g(1 + i) = (dgamma_dv(lambda(i)) + tau * beta(i) * xe(i)) * si + (1.0 - si);
        g(26 + i) = -beta(i) + tau * lambda(i) * xe(i);
      }
    } else {
      g.segment(1, 25) = -beta + tau * xe;
    }
    return g;
  };
  t.tape_log_density = [x, y, sparse](d::Tape& tape, d::Var p) {
    auto gamma_lp = [&](d::Var v) {
      Real c = 0.5 * std::log(0.5) - std::lgamma(0.5);
      return -0.5 * d::log(v) - 0.5 * v + c;
    };
    d::Var tt = d::slice(p, 0, 1);
    d::Var tau = d::softplus(tt);
    d::Var lp = gamma_lp(tau) + d::log(d::sigmoid(tt));
    d::Var beta, w;
    if (sparse) {
      d::Var lt = d::slice(p, 1, 25);
      d::Var lambda = d::softplus(lt);
      beta = d::slice(p, 26, 25);
      lp = lp + d::sum(-0.5 * d::log(lambda) - 0.5 * lambda +
                       (0.5 * std::log(0.5) - std::lgamma(0.5))) +
           d::sum(d::log(d::sigmoid(lt)));
      w = beta * lambda;
    } else {
      beta = d::slice(p, 1, 25);
      w = beta;
    }
    lp = lp + (-0.5 * d::dot(beta, beta) - 0.5 * 25.0 * kLog2Pi);
    d::Var logits = tau * d::matvec(tape.constant_matrix(x), w);
    lp = lp + d::dot(tape.constant(y), logits) - d::sum(d::softplus(logits));
    return lp;
  };
  return t;
}

// ---- dispatch ----

TargetDistribution build_target(const TargetSpec& spec,
                                const std::optional<PosteriorDataset>& dataset) {
  const std::string& f = spec.family;
  bool real_world =
      f == "eight_schools" || f == "german_credit" || f == "sparse_german_credit";
  if (real_world && !dataset)
    throw DataError(f + ": a dataset is required");
  if (!real_world && dataset)
    throw SpecError(f + ": dataset supplied for a synthetic family");

  TargetDistribution t;
  if (f == "standard_gaussian") {
    t = standard_gaussian(spec.dim);
  } else if (f == "diagonal_gaussian") {
    Vec stds = Vec::LinSpaced(spec.dim, 1.0, 10.0);
    t = diagonal_gaussian(spec.dim, stds);
  } else if (f == "full_rank_gaussian") {
    GaussianSpec g;
    g.dimension = spec.dim;
    g.kind = GaussianKind::kFullRank;
    g.eigenvalues = Vec::LinSpaced(spec.dim, 1.0, 10.0);
    g.rotation_seed = spec.seed;
    t = gaussian(g);
  } else if (f == "ill_conditioned_gaussian") {
    t = ill_conditioned_gaussian(spec.dim, spec.seed);
  } else if (f == "funnel") {
    t = funnel(spec.dim);
  } else if (f == "rosenbrock") {
    t = rosenbrock(spec.dim, spec.scale);
  } else if (f == "mixture3") {
    t = mixture3(spec.dim);
  } else if (f == "mixture20") {
    t = mixture20(spec.dim, spec.seed);
  } else if (f == "gaussian_mixture") {
    if (!spec.mixture) throw SpecError("gaussian_mixture: no components given");
    t = gaussian_mixture(*spec.mixture, "gaussian_mixture");
  } else if (f == "double_well") {
    t = double_well(spec.dim);
  } else if (f == "eight_schools") {
    t = eight_schools(*dataset);
  } else if (f == "german_credit") {
    t = german_credit(*dataset, false);
  } else if (f == "sparse_german_credit") {
    t = german_credit(*dataset, true);
  } else {
    throw SpecError("unknown target family \"" + f + "\"");
  }
  if (real_world) t.reference = spec.reference;  // from a reference-run file
  return t;
}

// ---- quadrature ----

namespace {
Real simpson(const std::function<Real(Real)>& f, Real a, Real b, Real fa, Real fm,
             Real fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

Real adaptive_simpson(const std::function<Real(Real)>& f, Real a, Real b, Real fa,
                      Real fm, Real fb, Real whole, Real tol, int depth) {
  Real m = 0.5 * (a + b);
  Real lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  Real flm = f(lm), frm = f(rm);
  Real left = simpson(f, a, m, fa, flm, fm);
  Real right = simpson(f, m, b, fm, frm, fb);
  if (depth <= 0 || std::fabs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}
}  // namespace

Real integrate(const std::function<Real(Real)>& f, Real a, Real b, Real tol) {
  Real fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  Real whole = simpson(f, a, b, fa, fm, fb);
  return adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, 60);
}

Real double_well_second_moment() {
  auto w = [](Real x) {
    Real q = x * x - 4.0;
    return std::exp(-q * q);
  };
  Real z = integrate(w, -6.0, 6.0, 1e-13);
  Real m2 = integrate([&](Real x) { return x * x * w(x); }, -6.0, 6.0, 1e-13);
  return m2 / z;
}

}  // namespace nfbench::targets
