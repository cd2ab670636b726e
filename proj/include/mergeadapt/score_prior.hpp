#pragma once

// Source-informed score prior.
//
// Each source keeps only a Beta fit of its rescaled scores. At adaptation
// time the per-source fits are collapsed into one Beta whose mean and
// variance equal those of their equal-weight mixture, and that Beta is
// integrated over the target's evenly spaced score bins.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mergeadapt/errors.hpp"

namespace mergeadapt {

/// Inclusive integer score range [lo, hi] with at least two classes.
class ScoreRange {
 public:
  ScoreRange(int lo, int hi);

  int lo() const { return lo_; }
  int hi() const { return hi_; }
  int classes() const { return hi_ - lo_ + 1; }
  bool contains(int y) const { return y >= lo_ && y <= hi_; }

  friend bool operator==(const ScoreRange&, const ScoreRange&) = default;

 private:
  int lo_;
  int hi_;
};

struct BetaParams {
  double alpha = 1.0;
  double beta = 1.0;

  double mean() const { return alpha / (alpha + beta); }
  double variance() const {
    const double s = alpha + beta;
    return alpha * beta / (s * s * (s + 1.0));
  }
};

/// Throws InvalidArgument unless alpha > 0 and beta > 0 (and both finite).
void validate(const BetaParams& p);

struct DiscretePrior {
  std::vector<double> probs;
  ScoreRange range{0, 1};
};

/// Everything about a source that survives into adaptation. No raw scores.
struct SourceStatistics {
  std::string source_id;
  ScoreRange range{0, 1};
  BetaParams beta;
  std::size_t n = 0;
};

class FitError : public Error {
 public:
  using Error::Error;
};

/// The Newton iteration hit its cap; `best` is the highest-likelihood iterate seen.
class ConvergenceError : public FitError {
 public:
  ConvergenceError(const std::string& what, BetaParams best) : FitError(what), best(best) {}
  BetaParams best;
};

class MomentFeasibilityError : public Error {
 public:
  using Error::Error;
};

/// (y - lo + 0.5) / (hi - lo + 1), strictly inside (0, 1).
std::vector<double> scale_scores(std::span<const int> scores, const ScoreRange& range);

/// Mean Beta log-density of `samples` (all in (0, 1)).
double beta_log_likelihood(std::span<const double> samples, const BetaParams& p);

/// Method-of-moments estimate, clamped to the fitting box.
BetaParams beta_moment_estimate(std::span<const double> samples);

struct BetaFitOptions {
  int max_iterations = 500;
  double step_tolerance = 1e-8;
  double min_param = 1e-3;
  double max_param = 1e6;
};

/// Maximum likelihood Beta fit: moment initializer, then Newton steps on the
/// digamma stationarity conditions with backtracking on the likelihood.
BetaParams fit_beta_mle(std::span<const double> samples, const BetaFitOptions& opts = {});

/// Single Beta matching the mean and variance of the equal-weight mixture.
BetaParams unify_betas(std::span<const BetaParams> params);

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double incomplete_beta(double x, double a, double b);

/// Bin masses of Beta(prior) over [c/C, (c+1)/C), c = 0..C-1.
DiscretePrior discretize(const BetaParams& prior, const ScoreRange& target);

DiscretePrior build_prior(std::span<const SourceStatistics> stats, const ScoreRange& target);

/// scale_scores + fit_beta_mle on one source's labels.
SourceStatistics compute_statistics(std::string source_id, std::span<const int> scores,
                                    const ScoreRange& range);

nlohmann::json to_json(const SourceStatistics& s);
SourceStatistics source_statistics_from_json(const nlohmann::json& j);

}  // namespace mergeadapt
