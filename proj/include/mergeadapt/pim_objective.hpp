#pragma once

// Prior-encoded information maximization over a batch of predicted score
// distributions, plus the mutual-information estimate it generalizes and the
// single-term ablations.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "mergeadapt/score_prior.hpp"

namespace mergeadapt {

/// Categorical distribution over the target's score classes.
struct ScoreDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
};

/// Throws InvalidArgument unless entries are finite, nonnegative and sum to 1 (1e-9).
void validate(const ScoreDistribution& d);

enum class ObjectiveVariant { kPim, kPimNoEntropy, kPimNoKl, kMiUniform };

struct ObjectiveConfig {
  ObjectiveVariant variant = ObjectiveVariant::kPim;
  std::optional<DiscretePrior> prior;
  double epsilon = 1e-12;
};

struct ObjectiveValue {
  double total = 0.0;
  double kl_term = 0.0;       // KL(marginal || prior); 0 when not computed
  double entropy_term = 0.0;  // mean per-sample entropy
  std::size_t n_samples = 0;
};

/// Sample mean of the distributions.
ScoreDistribution marginal(std::span<const ScoreDistribution> dists);

/// Natural-log entropy with 0 ln 0 = 0.
double entropy(const ScoreDistribution& d);

/// sum_c p_c ln(p_c / q_c); `epsilon` is added inside the logarithms only.
double kl_divergence(const ScoreDistribution& p, std::span<const double> q, double epsilon = 1e-12);
inline double kl_divergence(const ScoreDistribution& p, const DiscretePrior& q, double epsilon = 1e-12) {
  return kl_divergence(p, std::span<const double>(q.probs), epsilon);
}

ObjectiveValue evaluate(std::span<const ScoreDistribution> dists, const ObjectiveConfig& cfg);

nlohmann::json to_json(const ObjectiveValue& v);
ObjectiveValue objective_value_from_json(const nlohmann::json& j);

}  // namespace mergeadapt
