#include "mergeadapt/score_prior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace mergeadapt {

namespace {

double log_beta_fn(double a, double b) {
  return boost::math::lgamma(a) + boost::math::lgamma(b) - boost::math::lgamma(a + b);
}

// Continued fraction for I_x(a, b), valid for x < (a + 1) / (a + b + 2).
double beta_continued_fraction(double x, double a, double b) {
  constexpr int kMaxIter = 20000;
  constexpr double kEps = 1e-12;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

struct LogMoments {
  double log_x = 0.0;
  double log_1mx = 0.0;
};

LogMoments log_moments(std::span<const double> samples) {
  LogMoments m;
  for (double x : samples) {
    m.log_x += std::log(x);
    m.log_1mx += std::log1p(-x);
  }
  const auto n = static_cast<double>(samples.size());
  m.log_x /= n;
  m.log_1mx /= n;
  return m;
}

double log_likelihood(const LogMoments& m, double a, double b) {
  return (a - 1.0) * m.log_x + (b - 1.0) * m.log_1mx - log_beta_fn(a, b);
}

}  // namespace

ScoreRange::ScoreRange(int lo, int hi) : lo_(lo), hi_(hi) {
  if (hi_ - lo_ + 1 < 2)
    throw InvalidArgument("score range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                          "] needs at least two classes");
}

void validate(const BetaParams& p) {
  if (!(std::isfinite(p.alpha) && std::isfinite(p.beta) && p.alpha > 0.0 && p.beta > 0.0))
    throw InvalidArgument("Beta parameters must be finite and positive");
}

std::vector<double> scale_scores(std::span<const int> scores, const ScoreRange& range) {
  std::vector<double> out;
  out.reserve(scores.size());
  const double width = range.classes();
  for (int y : scores) {
    if (!range.contains(y))
      throw InvalidArgument("score " + std::to_string(y) + " outside [" + std::to_string(range.lo()) +
                            ", " + std::to_string(range.hi()) + "]");
    out.push_back((y - range.lo() + 0.5) / width);
  }
  return out;
}

double beta_log_likelihood(std::span<const double> samples, const BetaParams& p) {
  return log_likelihood(log_moments(samples), p.alpha, p.beta);
}

BetaParams beta_moment_estimate(std::span<const double> samples) {
  const BetaFitOptions box;
  const auto n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double var = 0.0;
  for (double x : samples) var += (x - mean) * (x - mean);
  var /= n;
  BetaParams p{1.0, 1.0};
  if (var > 0.0) {
    const double common = mean * (1.0 - mean) / var - 1.0;
    if (common > 0.0) p = {mean * common, (1.0 - mean) * common};
  }
  p.alpha = std::clamp(p.alpha, box.min_param, box.max_param);
  p.beta = std::clamp(p.beta, box.min_param, box.max_param);
  return p;
}

BetaParams fit_beta_mle(std::span<const double> samples, const BetaFitOptions& opts) {
  if (samples.size() < 2) throw FitError("Beta fit needs at least two samples");
  for (double x : samples)
    if (!(x > 0.0 && x < 1.0)) throw FitError("Beta fit samples must lie strictly inside (0, 1)");
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  if (*lo_it == *hi_it) throw FitError("Beta fit needs at least two distinct sample values");

  const LogMoments m = log_moments(samples);
  BetaParams p = beta_moment_estimate(samples);
  double ll = log_likelihood(m, p.alpha, p.beta);

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    const double psi_ab = boost::math::digamma(p.alpha + p.beta);
    const double g1 = m.log_x - boost::math::digamma(p.alpha) + psi_ab;
    const double g2 = m.log_1mx - boost::math::digamma(p.beta) + psi_ab;
    const double t_ab = boost::math::trigamma(p.alpha + p.beta);
    // Negative Hessian of the mean log-likelihood (positive definite).
    const double h11 = boost::math::trigamma(p.alpha) - t_ab;
    const double h22 = boost::math::trigamma(p.beta) - t_ab;
    const double h12 = -t_ab;
    const double det = h11 * h22 - h12 * h12;
    double da = 0.0;
    double db = 0.0;
    if (det > 0.0 && std::isfinite(det)) {
      da = (h22 * g1 - h12 * g2) / det;
      db = (h11 * g2 - h12 * g1) / det;
    } else {
      da = g1;
      db = g2;
    }

    double step = 1.0;
    bool moved = false;
    BetaParams next = p;
    double next_ll = ll;
    for (int bt = 0; bt < 60; ++bt) {
      next.alpha = std::clamp(p.alpha + step * da, opts.min_param, opts.max_param);
      next.beta = std::clamp(p.beta + step * db, opts.min_param, opts.max_param);
      next_ll = log_likelihood(m, next.alpha, next.beta);
      if (std::isfinite(next_ll) && next_ll >= ll) {
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) return p;

    const double change = std::hypot(next.alpha - p.alpha, next.beta - p.beta);
    p = next;
    ll = next_ll;
    if (change < opts.step_tolerance) return p;
  }
  throw ConvergenceError("Beta MLE did not converge within " + std::to_string(opts.max_iterations) +
                             " iterations",
                         p);
}

BetaParams unify_betas(std::span<const BetaParams> params) {
  if (params.empty()) throw InvalidArgument("cannot unify an empty list of Beta distributions");
  const auto m = static_cast<double>(params.size());
  double mean = 0.0;
  double second = 0.0;
  for (const auto& p : params) {
    validate(p);
    const double mu = p.mean();
    mean += mu;
    second += p.variance() + mu * mu;
  }
  mean /= m;
  const double var = second / m - mean * mean;
  const double spread = mean * (1.0 - mean);
  if (!(var > 0.0) || var >= spread)
    throw MomentFeasibilityError("mixture moments admit no Beta distribution (variance " +
                                 std::to_string(var) + ", mean " + std::to_string(mean) + ")");
  const double common = spread / var - 1.0;
  return {mean * common, (1.0 - mean) * common};
}

double incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw InvalidArgument("incomplete beta needs positive shape parameters");
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("incomplete beta argument outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = a * std::log(x) + b * std::log1p(-x) - log_beta_fn(a, b);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(x, a, b) / a;
  return 1.0 - std::exp(log_front) * beta_continued_fraction(1.0 - x, b, a) / b;
}

DiscretePrior discretize(const BetaParams& prior, const ScoreRange& target) {
  validate(prior);
  const int c = target.classes();
  DiscretePrior out{std::vector<double>(static_cast<std::size_t>(c)), target};
  double prev = 0.0;
  for (int k = 1; k <= c; ++k) {
    const double cdf = k == c ? 1.0 : incomplete_beta(static_cast<double>(k) / c, prior.alpha, prior.beta);
    const double mass = cdf - prev;
    if (!std::isfinite(mass)) throw NumericError("non-finite bin mass while discretizing prior");
    out.probs[static_cast<std::size_t>(k - 1)] = std::max(mass, 0.0);
    prev = cdf;
  }
  return out;
}

DiscretePrior build_prior(std::span<const SourceStatistics> stats, const ScoreRange& target) {
  std::vector<BetaParams> params;
  params.reserve(stats.size());
  for (const auto& s : stats) params.push_back(s.beta);
  return discretize(unify_betas(params), target);
}

SourceStatistics compute_statistics(std::string source_id, std::span<const int> scores,
                                    const ScoreRange& range) {
  const auto scaled = scale_scores(scores, range);
  BetaParams fit;
  try {
    fit = fit_beta_mle(scaled);
  } catch (const ConvergenceError& e) {
    fit = e.best;
  }
  return {std::move(source_id), range, fit, scores.size()};
}

nlohmann::json to_json(const SourceStatistics& s) {
  return {{"source_id", s.source_id},
          {"range", {s.range.lo(), s.range.hi()}},
          {"alpha", s.beta.alpha},
          {"beta", s.beta.beta},
          {"n", s.n}};
}

SourceStatistics source_statistics_from_json(const nlohmann::json& j) {
  try {
    const auto& r = j.at("range");
    SourceStatistics s{j.at("source_id").get<std::string>(),
                       ScoreRange(r.at(0).get<int>(), r.at(1).get<int>()),
                       {j.at("alpha").get<double>(), j.at("beta").get<double>()},
                       j.at("n").get<std::size_t>()};
    validate(s.beta);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad source-statistics document: ") + e.what());
  }
}

}  // namespace mergeadapt
