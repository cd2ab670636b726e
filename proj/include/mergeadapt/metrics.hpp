#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mergeadapt/pim_objective.hpp"
#include "mergeadapt/score_prior.hpp"

namespace mergeadapt {

struct RatingPair {
  int human = 0;
  int predicted = 0;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Quadratic weighted kappa with the marginal-product expected matrix.
/// Throws InvalidArgument on empty input or out-of-range scores and
/// DegenerateInputError when the expected disagreement is zero.
double qwk(std::span<const RatingPair> pairs, const ScoreRange& range);

/// Incremental QWK: counts accumulate one pair at a time.
class QwkAccumulator {
 public:
  explicit QwkAccumulator(const ScoreRange& range);

  void add(int human, int predicted);
  double value() const;
  std::size_t count() const { return count_; }

 private:
  ScoreRange range_;
  Eigen::MatrixXd observed_;
  std::size_t count_ = 0;
};

/// range.lo() + argmax; ties break toward the lower score.
int score_from_distribution(const ScoreDistribution& d, const ScoreRange& range);

}  // namespace mergeadapt
