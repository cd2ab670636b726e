#include "mergeadapt/metrics.hpp"

#include <string>

namespace mergeadapt {

QwkAccumulator::QwkAccumulator(const ScoreRange& range)
    : range_(range), observed_(Eigen::MatrixXd::Zero(range.classes(), range.classes())) {}

void QwkAccumulator::add(int human, int predicted) {
  if (!range_.contains(human) || !range_.contains(predicted))
    throw InvalidArgument("rating pair (" + std::to_string(human) + ", " + std::to_string(predicted) +
                          ") outside the score range");
  observed_(human - range_.lo(), predicted - range_.lo()) += 1.0;
  ++count_;
}

double QwkAccumulator::value() const {
  if (count_ == 0) throw InvalidArgument("QWK of an empty rating list");
  const Eigen::Index c = observed_.rows();
  const Eigen::VectorXd rows = observed_.rowwise().sum();
  const Eigen::VectorXd cols = observed_.colwise().sum().transpose();
  const double total = static_cast<double>(count_);
  const double denom_w = static_cast<double>((c - 1) * (c - 1));
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / denom_w;
      num += w * observed_(i, j);
      den += w * rows(i) * cols(j) / total;
    }
  }
  if (num == 0.0) return 1.0;
  if (den == 0.0) throw DegenerateInputError("QWK undefined: expected disagreement is zero");
  return 1.0 - num / den;
}

double qwk(std::span<const RatingPair> pairs, const ScoreRange& range) {
  QwkAccumulator acc(range);
  for (const auto& p : pairs) acc.add(p.human, p.predicted);
  return acc.value();
}

int score_from_distribution(const ScoreDistribution& d, const ScoreRange& range) {
  if (d.probs.empty()) throw InvalidArgument("empty score distribution");
  std::size_t best = 0;
  for (std::size_t k = 1; k < d.probs.size(); ++k)
    if (d.probs[k] > d.probs[best]) best = k;
  return range.lo() + static_cast<int>(best);
}

}  // namespace mergeadapt
