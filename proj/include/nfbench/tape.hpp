#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nfbench/errors.hpp"
#include "nfbench/types.hpp"

namespace nfbench::diff {

enum class OpKind : std::uint8_t {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kSquare,
  kSqrt,
  kAbs,
  kSum,
  kDot,
  kMatVec,
  kAffine,
  kMax,
  kMin,
};

class Tape;

/// Handle to a node on a tape. Values are vectors; scalars have size 1.
struct Var {
  Tape* tape = nullptr;
  std::int32_t index = -1;

  bool valid() const { return tape != nullptr && index >= 0; }
  Eigen::Index size() const;
  const Vec& value() const;
  Real scalar() const;
};

/// Append-only reverse-mode tape over a fixed operation set.
///
/// Recording an operation computes its value immediately, so primal results
/// can steer data-dependent recording (bin selection, fixed-point unrolls).
/// A recorded tape is also a static graph: evaluate() recomputes it for new
/// leaf values, and backward() runs one reverse sweep over the cached
/// primals.
class Tape {
 public:
  Tape() = default;

  // ---- leaves ----
  Var input(const Vec& v);
  Var input_matrix(const Mat& m);
  Var constant(const Vec& v);
  Var constant(Real x);
  Var constant_matrix(const Mat& m);

  // ---- recording (used by the free-function operators below) ----
  Var binary(OpKind kind, Var a, Var b);
  Var unary(OpKind kind, Var a);
  Var sum_op(Var a);
  Var dot_op(Var a, Var b);
  // mrows/mcols override the matrix operand's recorded shape (-1 = use it).
  Var matvec_op(Var m, Var x, bool transposed, Eigen::Index mrows = -1,
                Eigen::Index mcols = -1);
  Var affine_op(Var m, Var x, Var b, Eigen::Index mrows = -1,
                Eigen::Index mcols = -1);

  // ---- outputs & evaluation ----
  void set_output(Var v);
  const std::vector<std::int32_t>& outputs() const { return outputs_; }
  std::size_t input_count() const { return inputs_.size(); }

  /// Recompute the whole graph for new leaf values; returns the
  /// concatenated output values.
  Vec evaluate(const std::vector<Vec>& input_values);

  /// Reverse sweep from explicit seeds, at the current primal values.
  void backward(const std::vector<std::pair<Var, Vec>>& seeds);

  /// Requires a single scalar output. Evaluates at `input_values`, then
  /// returns d(output)/d(input) concatenated over all leaves.
  Vec gradient(const std::vector<Vec>& input_values);

  /// Adjoint of a node after backward(); zero vector if it was never touched.
  Vec adjoint(Var v) const;

  /// Gradient of a leaf input after backward().
  Vec input_adjoint(std::size_t input_pos) const;

  const Vec& value(std::int32_t index) const { return nodes_[index].value; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t forward_visits() const { return forward_visits_; }
  std::size_t reverse_visits() const { return reverse_visits_; }

  void reset();

  // Cached structural constants (selection, embedding, prefix sums).
  Var selector(Eigen::Index offset, Eigen::Index len, Eigen::Index size);
  Var lower_triangular_ones(Eigen::Index n);

 private:
  struct Node {
    OpKind kind;
    std::int32_t a = -1, b = -1, c = -1;
    std::int32_t rows = 0, cols = 1;       // shape of this node's value
    std::int32_t mrows = 0, mcols = 0;     // matrix-operand shape (matvec/affine)
    bool transposed = false;
    Vec value;
  };

  Var push(Node node);
  void compute(Node& node, std::int32_t index);
  void check_same_tape(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::int32_t> inputs_;
  std::vector<std::int32_t> outputs_;
  std::vector<Vec> adjoints_;
  std::vector<bool> touched_;
  std::size_t forward_visits_ = 0;
  std::size_t reverse_visits_ = 0;
  std::map<std::tuple<Eigen::Index, Eigen::Index, Eigen::Index>, std::int32_t> selector_cache_;
  std::map<Eigen::Index, std::int32_t> ltri_cache_;
};

// ---- operator sugar ----
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, Real b);
Var operator+(Real a, Var b);
Var operator-(Var a, Real b);
Var operator-(Real a, Var b);
Var operator*(Var a, Real b);
Var operator*(Real a, Var b);
Var operator/(Var a, Real b);
Var operator/(Real a, Var b);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var sum(Var a);
Var dot(Var a, Var b);
Var max(Var a, Var b);
Var min(Var a, Var b);
Var max(Var a, Real b);
Var min(Var a, Real b);

/// y = M x. The matrix operand may be any node whose value has mrows*mcols
/// entries (column-major); shapes are taken from the node or given explicitly.
Var matvec(Var m, Var x);
Var matvec(Var m, Var x, Eigen::Index mrows, Eigen::Index mcols);
/// y = M^T x.
Var matvec_t(Var m, Var x);
Var matvec_t(Var m, Var x, Eigen::Index mrows, Eigen::Index mcols);
/// y = M x + b.
Var affine(Var m, Var x, Var b);
Var affine(Var m, Var x, Var b, Eigen::Index mrows, Eigen::Index mcols);

// ---- helpers built from the fixed op set ----
Var slice(Var x, Eigen::Index offset, Eigen::Index len);
Var concat(std::span<const Var> parts);
Var concat(Var a, Var b);
/// Stable log(1 + exp(x)).
Var softplus(Var x);
/// Numerically shifted softmax; the shift is a primal-value constant, which
/// leaves both the value and the gradient exact.
Var softmax(Var x);
Var logsumexp(Var x);
Var cumsum(Var x);
/// -0.5 |x|^2 - (d/2) log(2 pi), as a scalar node.
Var std_normal_logpdf(Var x);

/// Maximum relative error between the reverse-mode gradient of `f` and
/// central finite differences at `point`. Non-finite comparisons give +inf.
Real check_gradient(const std::function<Var(Tape&, Var)>& f, const Vec& point,
                    Real step);

}  // namespace nfbench::diff
