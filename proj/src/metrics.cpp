#include "nfbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nfbench/errors.hpp"

namespace nfbench::metrics {

RunningMoments::RunningMoments(int dim, std::function<Vec(const Vec&)> transform)
    : mean_x_(Vec::Zero(dim)), mean_x2_(Vec::Zero(dim)),
      transform_(std::move(transform)) {}

void RunningMoments::merge_batch(const Vec& bx, const Vec& bx2, long m) {
  if (m == 0) return;
  long n = n_ + m;
  Real w_old = static_cast<Real>(n_) / static_cast<Real>(n);
  Real w_new = static_cast<Real>(m) / static_cast<Real>(n);
  mean_x_ = w_old * mean_x_ + w_new * bx;
  mean_x2_ = w_old * mean_x2_ + w_new * bx2;
  n_ = n;
}

void RunningMoments::update(const Mat& batch) {
  if (batch.rows() != mean_x_.size())
    throw InputError("running moments: batch dimension mismatch");
  if (batch.cols() == 0) throw InputError("running moments: empty batch");
  Vec bx = Vec::Zero(mean_x_.size());
  Vec bx2 = Vec::Zero(mean_x_.size());
  long kept = 0;
  for (Eigen::Index j = 0; j < batch.cols(); ++j) {
    Vec p = transform_ ? transform_(batch.col(j)) : Vec(batch.col(j));
    if (!p.allFinite()) {
      ++dropped_;
      continue;
    }
    bx += p;
    bx2 += p.array().square().matrix();
    ++kept;
  }
  if (kept == 0) return;
  merge_batch(bx / static_cast<Real>(kept), bx2 / static_cast<Real>(kept), kept);
}

void RunningMoments::merge(const RunningMoments& other) {
  if (other.dim() != dim()) throw InputError("running moments: dim mismatch");
  merge_batch(other.mean_x_, other.mean_x2_, other.n_);
  dropped_ += other.dropped_;
}

Real squared_bias(const Vec& estimated_second, const Vec& true_second,
                  const Vec& true_variance) {
  if (estimated_second.size() != true_second.size() ||
      true_second.size() != true_variance.size())
    throw InputError("squared_bias: length mismatch");
  if ((true_variance.array() <= 0).any())
    throw InputError("squared_bias: variances must be positive");
  Real worst = 0.0;
  for (Eigen::Index i = 0; i < true_second.size(); ++i) {
    Real e = estimated_second(i) - true_second(i);
    worst = std::max(worst, e * e / true_variance(i));
  }
  return worst;
}

Vec standardize_ranks(const Vec& values) {
  Eigen::Index k = values.size();
  if (k < 2) throw DegenerateRanks("standardize_ranks: need at least 2 methods");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](Eigen::Index a, Eigen::Index b) { return values(a) < values(b); });
  Vec ranks(k);
  Eigen::Index i = 0;
  while (i < k) {
    Eigen::Index j = i;
    while (j + 1 < k && values(idx[j + 1]) == values(idx[i])) ++j;
    Real avg = 0.5 * static_cast<Real>(i + j) + 1.0;  // average of ranks i+1..j+1
    for (Eigen::Index r = i; r <= j; ++r) ranks(idx[r]) = avg;
    i = j + 1;
  }
  Real mean = ranks.mean();
  Real ss = (ranks.array() - mean).square().sum();
  if (ss == 0.0) throw DegenerateRanks("standardize_ranks: all values tied");
  Real sd = std::sqrt(ss / static_cast<Real>(k - 1));
  return (ranks.array() - mean) / sd;
}

std::map<std::string, MethodAggregate> aggregate_ranks(
    const std::vector<RankTable>& tables) {
  if (tables.empty()) throw InputError("aggregate_ranks: no tables");
  std::vector<std::string> methods;
  for (const auto& [name, b2] : tables.front().b2_by_method) methods.push_back(name);
  for (const auto& table : tables) {
    if (table.b2_by_method.size() != methods.size())
      throw InputError("aggregate_ranks: inconsistent method sets");
    for (const auto& m : methods)
      if (!table.b2_by_method.count(m))
        throw InputError("aggregate_ranks: method \"" + m + "\" missing in target " +
                         table.target);
  }

  std::map<std::string, std::vector<Real>> per_method;
  for (const auto& table : tables) {
    Vec values(static_cast<Eigen::Index>(methods.size()));
    for (std::size_t i = 0; i < methods.size(); ++i)
      values(static_cast<Eigen::Index>(i)) = table.b2_by_method.at(methods[i]);
    Vec sr = standardize_ranks(values);
    for (std::size_t i = 0; i < methods.size(); ++i)
      per_method[methods[i]].push_back(sr(static_cast<Eigen::Index>(i)));
  }

  std::map<std::string, MethodAggregate> out;
  long b = static_cast<long>(tables.size());
  for (const auto& [name, ranks] : per_method) {
    MethodAggregate agg;
    agg.n_targets = b;
    Real mean = 0.0;
    for (Real r : ranks) mean += r;
    mean /= static_cast<Real>(b);
    agg.mean_rank = mean;
    if (b > 1) {
      Real ss = 0.0;
      for (Real r : ranks) ss += (r - mean) * (r - mean);
      agg.std_error = std::sqrt(ss / static_cast<Real>(b - 1)) /
                      std::sqrt(static_cast<Real>(b));
    }
    out[name] = agg;
  }
  return out;
}

}  // namespace nfbench::metrics
