#pragma once

// Gaussian-process Bayesian optimization over a coefficient box.
//
// Zero prior mean, Matern-5/2 covariance, Expected Improvement acquisition.
// Kernel hyperparameters are refit every round by maximizing the log
// marginal likelihood over a fixed log-spaced grid, so a run is a pure
// function of its configuration and objective.

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "mergeadapt/errors.hpp"
#include "mergeadapt/pim_objective.hpp"

namespace mergeadapt {

using Vector = Eigen::VectorXd;

/// s2 * (1 + sqrt(5) d / l + 5 d^2 / (3 l^2)) * exp(-sqrt(5) d / l), d = |a - b|.
double kernel_matern25(const Vector& a, const Vector& b, double length_scale, double signal_variance);

/// Same kernel as a function of the distance.
double matern25_at_distance(double d, double length_scale, double signal_variance);

struct GpHyperparameters {
  double length_scale = 1.0;
  double signal_variance = 1.0;
};

struct JitterSchedule {
  double initial = 1e-8;
  double max = 1e-2;
  double growth = 10.0;
};

class ConditioningError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct Posterior {
  double mean = 0.0;
  double variance = 0.0;
};

class GpModel {
 public:
  /// Factorizes K + jitter I, escalating jitter on failure; throws
  /// ConditioningError past `schedule.max`.
  GpModel(std::vector<Vector> inputs, std::vector<double> targets, GpHyperparameters hp,
          JitterSchedule schedule = {});

  Posterior posterior(const Vector& query) const;
  double log_marginal_likelihood() const;

  const GpHyperparameters& hyperparameters() const { return hp_; }
  double jitter() const { return jitter_; }
  std::size_t size() const { return inputs_.size(); }
  const std::vector<Vector>& inputs() const { return inputs_; }
  const std::vector<double>& targets() const { return targets_; }
  double best_target() const;

 private:
  std::vector<Vector> inputs_;
  std::vector<double> targets_;
  GpHyperparameters hp_;
  double jitter_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Vector alpha_;
};

struct HyperparameterGrid {
  int points = 32;
  double length_min = 0.05;
  double length_max = 5.0;
  double variance_min = 0.01;
  double variance_max = 100.0;
};

/// Grid point with the highest log marginal likelihood; ties keep the first.
GpHyperparameters fit_hyperparameters(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                                      const HyperparameterGrid& grid = {}, JitterSchedule schedule = {});

/// Closed-form EI of a Gaussian N(mean, variance) over f_best + xi.
double expected_improvement(double mean, double variance, double f_best, double xi);

struct BoConfig {
  std::vector<std::pair<double, double>> bounds;
  int n_init = 10;
  int n_iter = 30;
  double xi = 0.01;
  std::uint64_t seed = 0;
  int n_candidates = 4096;
  int n_restarts = 8;
  HyperparameterGrid grid;
  JitterSchedule jitter;

  static BoConfig unit_box(std::size_t dims, std::uint64_t seed = 0) {
    BoConfig c;
    c.bounds.assign(dims, {0.0, 1.0});
    c.seed = seed;
    return c;
  }
  std::size_t dims() const { return bounds.size(); }
  /// Throws InvalidArgument on an empty box, lo >= hi, n_init < 1, n_iter < 0 or xi < 0.
  void validate() const;
};

struct BoIteration {
  Vector lambda;
  ObjectiveValue objective;
  std::optional<Posterior> posterior;  // absent for the initial random probes
  std::optional<GpHyperparameters> hyperparameters;
  double best = 0.0;  // running best objective total
};

struct BoTrace {
  BoConfig config;
  std::vector<BoIteration> iterations;
  Vector lambda_star;
  std::size_t best_index = 0;

  double best_value() const { return iterations.at(best_index).objective.total; }
};

using BlackBox = std::function<ObjectiveValue(const Vector&)>;

/// An objective evaluation threw; `partial` holds every completed iteration.
class OptimizationError : public Error {
 public:
  OptimizationError(const std::string& what, BoTrace partial) : Error(what), partial(std::move(partial)) {}
  BoTrace partial;
};

/// Approximate EI maximizer: `n_candidates` shifted-Halton points, then
/// coordinate-wise golden-section refinement of the best `n_restarts`.
/// `round` decorrelates the quasi-random shift between rounds.
Vector propose_next(const GpModel& model, const BoConfig& cfg, std::uint64_t round = 0);

BoTrace optimize(const BlackBox& f, const BoConfig& cfg);

/// Same budget and trace format as optimize, every point uniform at random.
BoTrace random_search(const BlackBox& f, const BoConfig& cfg);

nlohmann::json to_json(const BoConfig& c);
nlohmann::json to_json(const BoTrace& t);
BoTrace bo_trace_from_json(const nlohmann::json& j);

}  // namespace mergeadapt
