#include "nfbench/tape.hpp"

#include <algorithm>
#include <cmath>

namespace nfbench::diff {

namespace {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kNeg: return "neg";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kAbs: return "abs";
    case OpKind::kSum: return "sum";
    case OpKind::kDot: return "dot";
    case OpKind::kMatVec: return "matvec";
    case OpKind::kAffine: return "affine";
    case OpKind::kMax: return "max";
    case OpKind::kMin: return "min";
  }
  return "?";
}

Vec broadcast(const Vec& v, Eigen::Index n) {
  if (v.size() == n) return v;
  return Vec::Constant(n, v(0));
}

}  // namespace

Eigen::Index Var::size() const { return tape->value(index).size(); }
const Vec& Var::value() const { return tape->value(index); }
Real Var::scalar() const {
  const Vec& v = tape->value(index);
  if (v.size() != 1) throw ContractViolation("scalar() on non-scalar node");
  return v(0);
}

void Tape::check_same_tape(Var v) const {
  if (v.tape != this || v.index < 0 ||
      v.index >= static_cast<std::int32_t>(nodes_.size()))
    throw ContractViolation("Var does not belong to this tape");
}

Var Tape::push(Node node) {
  auto index = static_cast<std::int32_t>(nodes_.size());
  compute(node, index);
  nodes_.push_back(std::move(node));
  return Var{this, index};
}

Var Tape::input(const Vec& v) {
  Node n;
  n.kind = OpKind::kInput;
  n.value = v;
  n.rows = static_cast<std::int32_t>(v.size());
  Var out = push(std::move(n));
  inputs_.push_back(out.index);
  return out;
}

Var Tape::input_matrix(const Mat& m) {
  Node n;
  n.kind = OpKind::kInput;
  n.value = Eigen::Map<const Vec>(m.data(), m.size());
  n.rows = static_cast<std::int32_t>(m.rows());
  n.cols = static_cast<std::int32_t>(m.cols());
  Var out = push(std::move(n));
  inputs_.push_back(out.index);
  return out;
}

Var Tape::constant(const Vec& v) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = v;
  n.rows = static_cast<std::int32_t>(v.size());
  return push(std::move(n));
}

Var Tape::constant(Real x) { return constant(Vec::Constant(1, x)); }

Var Tape::constant_matrix(const Mat& m) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = Eigen::Map<const Vec>(m.data(), m.size());
  n.rows = static_cast<std::int32_t>(m.rows());
  n.cols = static_cast<std::int32_t>(m.cols());
  return push(std::move(n));
}

Var Tape::binary(OpKind kind, Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  Eigen::Index na = a.size(), nb = b.size();
  if (na != nb && na != 1 && nb != 1)
    throw ContractViolation(std::string(op_name(kind)) + ": size mismatch " +
                            std::to_string(na) + " vs " + std::to_string(nb));
  Node n;
  n.kind = kind;
  n.a = a.index;
  n.b = b.index;
  const Node& big = na >= nb ? nodes_[a.index] : nodes_[b.index];
  n.rows = big.rows;
  n.cols = big.cols;
  return push(std::move(n));
}

Var Tape::unary(OpKind kind, Var a) {
  check_same_tape(a);
  Node n;
  n.kind = kind;
  n.a = a.index;
  n.rows = nodes_[a.index].rows;
  n.cols = nodes_[a.index].cols;
  return push(std::move(n));
}

Var Tape::sum_op(Var a) {
  check_same_tape(a);
  Node n;
  n.kind = OpKind::kSum;
  n.a = a.index;
  n.rows = 1;
  return push(std::move(n));
}

Var Tape::dot_op(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.size() != b.size()) throw ContractViolation("dot: size mismatch");
  Node n;
  n.kind = OpKind::kDot;
  n.a = a.index;
  n.b = b.index;
  n.rows = 1;
  return push(std::move(n));
}

Var Tape::matvec_op(Var m, Var x, bool transposed, Eigen::Index mrows,
                    Eigen::Index mcols) {
  check_same_tape(m);
  check_same_tape(x);
  const Node& mn = nodes_[m.index];
  Eigen::Index mr = mrows >= 0 ? mrows : mn.rows;
  Eigen::Index mc = mcols >= 0 ? mcols : mn.cols;
  if (mr * mc != mn.value.size())
    throw ContractViolation("matvec: matrix operand has inconsistent shape");
  Eigen::Index in = transposed ? mr : mc;
  Eigen::Index out = transposed ? mc : mr;
  if (x.size() != in) throw ContractViolation("matvec: vector size mismatch");
  Node n;
  n.kind = OpKind::kMatVec;
  n.a = m.index;
  n.b = x.index;
  n.mrows = static_cast<std::int32_t>(mr);
  n.mcols = static_cast<std::int32_t>(mc);
  n.transposed = transposed;
  n.rows = static_cast<std::int32_t>(out);
  return push(std::move(n));
}

Var Tape::affine_op(Var m, Var x, Var b, Eigen::Index mrows, Eigen::Index mcols) {
  check_same_tape(m);
  check_same_tape(x);
  check_same_tape(b);
  const Node& mn = nodes_[m.index];
  Eigen::Index mr = mrows >= 0 ? mrows : mn.rows;
  Eigen::Index mc = mcols >= 0 ? mcols : mn.cols;
  if (mr * mc != mn.value.size())
    throw ContractViolation("affine: matrix operand has inconsistent shape");
  if (x.size() != mc || b.size() != mr)
    throw ContractViolation("affine: operand size mismatch");
  Node n;
  n.kind = OpKind::kAffine;
  n.a = m.index;
  n.b = x.index;
  n.c = b.index;
  n.mrows = static_cast<std::int32_t>(mr);
  n.mcols = static_cast<std::int32_t>(mc);
  n.rows = static_cast<std::int32_t>(mr);
  return push(std::move(n));
}

void Tape::compute(Node& node, std::int32_t index) {
  ++forward_visits_;
  auto val = [&](std::int32_t i) -> const Vec& { return nodes_[i].value; };
  switch (node.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
      break;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv:
    case OpKind::kMax:
    case OpKind::kMin: {
      const Vec& a = val(node.a);
      const Vec& b = val(node.b);
      Eigen::Index n = std::max(a.size(), b.size());
      Vec av = broadcast(a, n), bv = broadcast(b, n);
      switch (node.kind) {
        case OpKind::kAdd: node.value = av + bv; break;
        case OpKind::kSub: node.value = av - bv; break;
        case OpKind::kMul: node.value = av.cwiseProduct(bv); break;
        case OpKind::kDiv: node.value = av.cwiseQuotient(bv); break;
        case OpKind::kMax: node.value = av.cwiseMax(bv); break;
        case OpKind::kMin: node.value = av.cwiseMin(bv); break;
        default: break;
      }
      break;
    }
    case OpKind::kNeg: node.value = -val(node.a); break;
    case OpKind::kExp: node.value = val(node.a).array().exp(); break;
    case OpKind::kLog: node.value = val(node.a).array().log(); break;
    case OpKind::kTanh: node.value = val(node.a).array().tanh(); break;
    case OpKind::kSigmoid: {
      const Vec& a = val(node.a);
      node.value.resize(a.size());
      for (Eigen::Index i = 0; i < a.size(); ++i) node.value(i) = nfbench::sigmoid(a(i));
      break;
    }
    case OpKind::kSquare: node.value = val(node.a).array().square(); break;
    case OpKind::kSqrt: node.value = val(node.a).array().sqrt(); break;
    case OpKind::kAbs: node.value = val(node.a).array().abs(); break;
    case OpKind::kSum: node.value = Vec::Constant(1, val(node.a).sum()); break;
    case OpKind::kDot:
      node.value = Vec::Constant(1, val(node.a).dot(val(node.b)));
      break;
    case OpKind::kMatVec:
    case OpKind::kAffine: {
      Eigen::Map<const Mat> m(val(node.a).data(), node.mrows, node.mcols);
      const Vec& x = val(node.b);
      if (node.transposed)
        node.value = m.transpose() * x;
      else
        node.value = m * x;
      if (node.kind == OpKind::kAffine) node.value += val(node.c);
      break;
    }
  }
  if (!node.value.allFinite())
    throw NumericalError(std::string("non-finite value in ") + op_name(node.kind),
                         index);
}

void Tape::set_output(Var v) {
  check_same_tape(v);
  outputs_.push_back(v.index);
}

Vec Tape::evaluate(const std::vector<Vec>& input_values) {
  if (input_values.size() != inputs_.size())
    throw ContractViolation("evaluate: expected " + std::to_string(inputs_.size()) +
                            " input vectors, got " + std::to_string(input_values.size()));
  for (std::size_t i = 0; i < inputs_.size(); ++i) {
    Node& leaf = nodes_[inputs_[i]];
    if (input_values[i].size() != leaf.value.size())
      throw ContractViolation("evaluate: input " + std::to_string(i) + " has size " +
                              std::to_string(input_values[i].size()) + ", expected " +
                              std::to_string(leaf.value.size()));
    if (!input_values[i].allFinite())
      throw InputError("evaluate: non-finite input value");
    leaf.value = input_values[i];
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == OpKind::kInput || nodes_[i].kind == OpKind::kConstant)
      continue;
    compute(nodes_[i], static_cast<std::int32_t>(i));
  }
  Eigen::Index total = 0;
  for (auto o : outputs_) total += nodes_[o].value.size();
  Vec out(total);
  Eigen::Index pos = 0;
  for (auto o : outputs_) {
    out.segment(pos, nodes_[o].value.size()) = nodes_[o].value;
    pos += nodes_[o].value.size();
  }
  return out;
}

void Tape::backward(const std::vector<std::pair<Var, Vec>>& seeds) {
  adjoints_.assign(nodes_.size(), Vec());
  touched_.assign(nodes_.size(), false);
  auto touch = [&](std::int32_t i) -> Vec& {
    if (!touched_[i]) {
      adjoints_[i] = Vec::Zero(nodes_[i].value.size());
      touched_[i] = true;
    }
    return adjoints_[i];
  };
  for (const auto& [v, seed] : seeds) {
    check_same_tape(v);
    if (seed.size() != v.size())
      throw ContractViolation("backward: seed size mismatch");
    touch(v.index) += seed;
  }
  auto accum = [&](std::int32_t parent, const Vec& grad) {
    Vec& g = touch(parent);
    if (g.size() == grad.size())
      g += grad;
    else if (g.size() == 1)
      g(0) += grad.sum();
    else
      throw ContractViolation("backward: adjoint size mismatch");
  };
  for (std::int32_t i = static_cast<std::int32_t>(nodes_.size()) - 1; i >= 0; --i) {
    if (!touched_[i]) continue;
    ++reverse_visits_;
    const Node& node = nodes_[i];
    const Vec& g = adjoints_[i];
    auto val = [&](std::int32_t j) -> const Vec& { return nodes_[j].value; };
    switch (node.kind) {
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd:
        accum(node.a, g);
        accum(node.b, g);
        break;
      case OpKind::kSub:
        accum(node.a, g);
        accum(node.b, -g);
        break;
      case OpKind::kMul: {
        Eigen::Index n = g.size();
        accum(node.a, g.cwiseProduct(broadcast(val(node.b), n)));
        accum(node.b, g.cwiseProduct(broadcast(val(node.a), n)));
        break;
      }
      case OpKind::kDiv: {
        Eigen::Index n = g.size();
        Vec bv = broadcast(val(node.b), n);
        accum(node.a, g.cwiseQuotient(bv));
        accum(node.b, -g.cwiseProduct(node.value).cwiseQuotient(bv));
        break;
      }
      case OpKind::kMax:
      case OpKind::kMin: {
        Eigen::Index n = g.size();
        Vec av = broadcast(val(node.a), n);
        Vec bv = broadcast(val(node.b), n);
        Vec ga(n), gb(n);
        for (Eigen::Index k = 0; k < n; ++k) {
          bool take_a = node.kind == OpKind::kMax ? av(k) >= bv(k) : av(k) <= bv(k);
          ga(k) = take_a ? g(k) : 0.0;
          gb(k) = take_a ? 0.0 : g(k);
        }
        accum(node.a, ga);
        accum(node.b, gb);
        break;
      }
      case OpKind::kNeg: accum(node.a, -g); break;
      case OpKind::kExp: accum(node.a, g.cwiseProduct(node.value)); break;
      case OpKind::kLog: accum(node.a, g.cwiseQuotient(val(node.a))); break;
      case OpKind::kTanh:
        accum(node.a, (g.array() * (1.0 - node.value.array().square())).matrix());
        break;
      case OpKind::kSigmoid:
        accum(node.a,
              (g.array() * node.value.array() * (1.0 - node.value.array())).matrix());
        break;
      case OpKind::kSquare:
        accum(node.a, (2.0 * g.array() * val(node.a).array()).matrix());
        break;
      case OpKind::kSqrt:
        accum(node.a, (g.array() / (2.0 * node.value.array())).matrix());
        break;
      case OpKind::kAbs:
        accum(node.a, (g.array() * val(node.a).array().sign()).matrix());
        break;
      case OpKind::kSum:
        accum(node.a, Vec::Constant(val(node.a).size(), g(0)));
        break;
      case OpKind::kDot:
        accum(node.a, g(0) * val(node.b));
        accum(node.b, g(0) * val(node.a));
        break;
      case OpKind::kMatVec:
      case OpKind::kAffine: {
        Eigen::Map<const Mat> m(val(node.a).data(), node.mrows, node.mcols);
        const Vec& x = val(node.b);
        Mat dm(node.mrows, node.mcols);
        Vec dx;
        if (node.transposed) {
          dm.noalias() = x * g.transpose();
          dx.noalias() = m * g;
        } else {
          dm.noalias() = g * x.transpose();
          dx.noalias() = m.transpose() * g;
        }
        accum(node.a, Eigen::Map<const Vec>(dm.data(), dm.size()));
        accum(node.b, dx);
        if (node.kind == OpKind::kAffine) accum(node.c, g);
        break;
      }
    }
  }
}

Vec Tape::gradient(const std::vector<Vec>& input_values) {
  if (outputs_.size() != 1)
    throw ContractViolation("gradient: tape must have exactly one output, has " +
                            std::to_string(outputs_.size()));
  evaluate(input_values);
  if (nodes_[outputs_[0]].value.size() != 1)
    throw ContractViolation("gradient: output must be scalar");
  backward({{Var{this, outputs_[0]}, Vec::Ones(1)}});
  Eigen::Index total = 0;
  for (auto i : inputs_) total += nodes_[i].value.size();
  Vec out = Vec::Zero(total);
  Eigen::Index pos = 0;
  for (auto i : inputs_) {
    Eigen::Index n = nodes_[i].value.size();
    if (touched_[i]) out.segment(pos, n) = adjoints_[i];
    pos += n;
  }
  return out;
}

Vec Tape::adjoint(Var v) const {
  check_same_tape(v);
  if (touched_.size() == nodes_.size() && touched_[v.index]) return adjoints_[v.index];
  return Vec::Zero(v.size());
}

Vec Tape::input_adjoint(std::size_t input_pos) const {
  if (input_pos >= inputs_.size()) throw ContractViolation("input_adjoint: bad index");
  return adjoint(Var{const_cast<Tape*>(this), inputs_[input_pos]});
}

void Tape::reset() {
  nodes_.clear();
  inputs_.clear();
  outputs_.clear();
  adjoints_.clear();
  touched_.clear();
  selector_cache_.clear();
  ltri_cache_.clear();
  forward_visits_ = 0;
  reverse_visits_ = 0;
}

Var Tape::selector(Eigen::Index offset, Eigen::Index len, Eigen::Index size) {
  auto key = std::make_tuple(offset, len, size);
  auto it = selector_cache_.find(key);
  if (it != selector_cache_.end()) return Var{this, it->second};
  Mat s = Mat::Zero(len, size);
  for (Eigen::Index i = 0; i < len; ++i) s(i, offset + i) = 1.0;
  Var v = constant_matrix(s);
  selector_cache_.emplace(key, v.index);
  return v;
}

Var Tape::lower_triangular_ones(Eigen::Index n) {
  auto it = ltri_cache_.find(n);
  if (it != ltri_cache_.end()) return Var{this, it->second};
  Mat l = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) l(i, j) = 1.0;
  Var v = constant_matrix(l);
  ltri_cache_.emplace(n, v.index);
  return v;
}

// ---- free functions ----

Var operator+(Var a, Var b) { return a.tape->binary(OpKind::kAdd, a, b); }
Var operator-(Var a, Var b) { return a.tape->binary(OpKind::kSub, a, b); }
Var operator*(Var a, Var b) { return a.tape->binary(OpKind::kMul, a, b); }
Var operator/(Var a, Var b) { return a.tape->binary(OpKind::kDiv, a, b); }
Var operator-(Var a) { return a.tape->unary(OpKind::kNeg, a); }
Var operator+(Var a, Real b) { return a + a.tape->constant(b); }
Var operator+(Real a, Var b) { return b.tape->constant(a) + b; }
Var operator-(Var a, Real b) { return a - a.tape->constant(b); }
Var operator-(Real a, Var b) { return b.tape->constant(a) - b; }
Var operator*(Var a, Real b) { return a * a.tape->constant(b); }
Var operator*(Real a, Var b) { return b.tape->constant(a) * b; }
Var operator/(Var a, Real b) { return a / a.tape->constant(b); }
Var operator/(Real a, Var b) { return b.tape->constant(a) / b; }

Var exp(Var a) { return a.tape->unary(OpKind::kExp, a); }
Var log(Var a) { return a.tape->unary(OpKind::kLog, a); }
Var tanh(Var a) { return a.tape->unary(OpKind::kTanh, a); }
Var sigmoid(Var a) { return a.tape->unary(OpKind::kSigmoid, a); }
Var square(Var a) { return a.tape->unary(OpKind::kSquare, a); }
Var sqrt(Var a) { return a.tape->unary(OpKind::kSqrt, a); }
Var abs(Var a) { return a.tape->unary(OpKind::kAbs, a); }
Var sum(Var a) { return a.tape->sum_op(a); }
Var dot(Var a, Var b) { return a.tape->dot_op(a, b); }
Var max(Var a, Var b) { return a.tape->binary(OpKind::kMax, a, b); }
Var min(Var a, Var b) { return a.tape->binary(OpKind::kMin, a, b); }
Var max(Var a, Real b) { return max(a, a.tape->constant(b)); }
Var min(Var a, Real b) { return min(a, a.tape->constant(b)); }

Var matvec(Var m, Var x) { return m.tape->matvec_op(m, x, false); }
Var matvec_t(Var m, Var x) { return m.tape->matvec_op(m, x, true); }
Var affine(Var m, Var x, Var b) { return m.tape->affine_op(m, x, b); }

Var matvec(Var m, Var x, Eigen::Index mrows, Eigen::Index mcols) {
  return m.tape->matvec_op(m, x, false, mrows, mcols);
}

Var matvec_t(Var m, Var x, Eigen::Index mrows, Eigen::Index mcols) {
  return m.tape->matvec_op(m, x, true, mrows, mcols);
}

Var affine(Var m, Var x, Var b, Eigen::Index mrows, Eigen::Index mcols) {
  return m.tape->affine_op(m, x, b, mrows, mcols);
}

Var slice(Var x, Eigen::Index offset, Eigen::Index len) {
  if (offset < 0 || len < 0 || offset + len > x.size())
    throw ContractViolation("slice: out of range");
  return matvec(x.tape->selector(offset, len, x.size()), x);
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat: no parts");
  Eigen::Index total = 0;
  for (const Var& p : parts) total += p.size();
  Tape* t = parts[0].tape;
  Var out{};
  Eigen::Index pos = 0;
  for (const Var& p : parts) {
    Var embedded = matvec_t(t->selector(pos, p.size(), total), p);
    out = out.valid() ? out + embedded : embedded;
    pos += p.size();
  }
  return out;
}

Var concat(Var a, Var b) {
  std::array<Var, 2> parts{a, b};
  return concat(std::span<const Var>(parts));
}

Var softplus(Var x) {
  return max(x, 0.0) + log(1.0 + exp(-abs(x)));
}

Var softmax(Var x) {
  Real shift = x.value().maxCoeff();
  Var e = exp(x - shift);
  return e / sum(e);
}

Var logsumexp(Var x) {
  Real shift = x.value().maxCoeff();
  return log(sum(exp(x - shift))) + shift;
}

Var cumsum(Var x) {
  return matvec(x.tape->lower_triangular_ones(x.size()), x);
}

Var std_normal_logpdf(Var x) {
  Real c = -0.5 * static_cast<Real>(x.size()) * kLog2Pi;
  return -0.5 * dot(x, x) + c;
}

Real check_gradient(const std::function<Var(Tape&, Var)>& f, const Vec& point,
                    Real step) {
  if (!(step > 0)) throw ContractViolation("check_gradient: step must be > 0");
  Vec grad;
  {
    Tape t;
    Var x = t.input(point);
    Var y = f(t, x);
    if (y.size() != 1) throw ContractViolation("check_gradient: f must be scalar");
    t.set_output(y);
    grad = t.gradient({point});
  }
  auto value_at = [&](const Vec& p) -> Real {
    Tape t;
    Var x = t.input(p);
    return f(t, x).scalar();
  };
  Real worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    Vec lo = point, hi = point;
    lo(i) -= step;
    hi(i) += step;
    Real fd, a;
    try {
      fd = (value_at(hi) - value_at(lo)) / (2.0 * step);
      a = grad(i);
    } catch (const Error&) {
      return std::numeric_limits<Real>::infinity();
    }
    if (!std::isfinite(fd) || !std::isfinite(a))
      return std::numeric_limits<Real>::infinity();
    Real denom = std::max({1.0, std::fabs(a), std::fabs(fd)});
    worst = std::max(worst, std::fabs(a - fd) / denom);
  }
  return worst;
}

}  // namespace nfbench::diff
