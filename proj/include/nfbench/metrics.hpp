#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nfbench/types.hpp"

namespace nfbench::metrics {

/// Streaming first/second moment accumulator with the weighted-merge update.
/// Memory is constant in the stream length. An optional transform (the
/// inverse flow map, for preconditioned runs) is applied to each point before
/// accumulation; points that map to non-finite values are dropped and
/// counted.
class RunningMoments {
 public:
  explicit RunningMoments(int dim, std::function<Vec(const Vec&)> transform = {});

  void update(const Mat& batch);  // dim x n
  void merge(const RunningMoments& other);

  long count() const { return n_; }
  long dropped() const { return dropped_; }
  int dim() const { return static_cast<int>(mean_x_.size()); }
  const Vec& first_moment() const { return mean_x_; }
  const Vec& second_moment() const { return mean_x2_; }

 private:
  void merge_batch(const Vec& bx, const Vec& bx2, long m);
  Vec mean_x_, mean_x2_;
  long n_ = 0;
  long dropped_ = 0;
  std::function<Vec(const Vec&)> transform_;
};

/// max_d (E~[X_d^2] - E[X_d^2])^2 / Var[X_d].
Real squared_bias(const Vec& estimated_second, const Vec& true_second,
                  const Vec& true_variance);

/// Ascending ranks of b^2 values (ties averaged), centered and scaled to
/// sample standard deviation 1. Throws DegenerateRanks for K < 2 or all-tied
/// input.
Vec standardize_ranks(const Vec& values);

struct RankTable {
  std::string target;
  std::map<std::string, Real> b2_by_method;
};

struct MethodAggregate {
  Real mean_rank = 0.0;
  std::optional<Real> std_error;  // absent when B = 1
  long n_targets = 0;
};

/// Standardizes ranks within each table, then aggregates per method across
/// tables. All tables must contain the same method set.
std::map<std::string, MethodAggregate> aggregate_ranks(
    const std::vector<RankTable>& tables);

}  // namespace nfbench::metrics
