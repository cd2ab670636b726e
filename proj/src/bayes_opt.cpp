#include "mergeadapt/bayes_opt.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

namespace mergeadapt {

namespace {

constexpr double kSqrt5 = 2.23606797749978969640917366873128;

// Uniform double in [0, 1) from the top 53 bits.
double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Vector uniform_point(std::mt19937_64& rng, const BoConfig& cfg) {
  Vector x(static_cast<Eigen::Index>(cfg.dims()));
  for (std::size_t d = 0; d < cfg.dims(); ++d) {
    const auto [lo, hi] = cfg.bounds[d];
    x(static_cast<Eigen::Index>(d)) = lo + unit_draw(rng) * (hi - lo);
  }
  return x;
}

double radical_inverse(std::uint64_t index, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base);
  double f = inv;
  double r = 0.0;
  while (index > 0) {
    r += f * static_cast<double>(index % base);
    index /= base;
    f *= inv;
  }
  return r;
}

std::uint64_t nth_prime(std::size_t n) {
  std::uint64_t candidate = 1;
  std::size_t found = 0;
  while (found <= n) {
    ++candidate;
    bool prime = true;
    for (std::uint64_t p = 2; p * p <= candidate; ++p)
      if (candidate % p == 0) {
        prime = false;
        break;
      }
    if (prime) ++found;
  }
  return candidate;
}

Eigen::MatrixXd distance_matrix(const std::vector<Vector>& xs) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = i + 1; k < n; ++k) d(i, k) = d(k, i) = (xs[i] - xs[k]).norm();
  return d;
}

struct Factorization {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter;
};

std::optional<Factorization> factorize(const Eigen::MatrixXd& distances, const GpHyperparameters& hp,
                                       const JitterSchedule& schedule) {
  const Eigen::Index n = distances.rows();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      k(i, j) = matern25_at_distance(distances(i, j), hp.length_scale, hp.signal_variance);
  for (double jitter = schedule.initial; jitter <= schedule.max * (1.0 + 1e-12); jitter *= schedule.growth) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(kj);
    if (llt.info() == Eigen::Success) return Factorization{std::move(llt), jitter};
  }
  return std::nullopt;
}

double lml_from(const Eigen::LLT<Eigen::MatrixXd>& llt, const Vector& y) {
  const Vector alpha = llt.solve(y);
  const Eigen::MatrixXd& factor = llt.matrixLLT();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < factor.rows(); ++i) log_det += std::log(factor(i, i));
  return -0.5 * y.dot(alpha) - log_det - 0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

Vector to_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

double acquisition(const GpModel& model, const Vector& x, double f_best, double xi) {
  const Posterior p = model.posterior(x);
  return expected_improvement(p.mean, p.variance, f_best, xi);
}

// Golden-section maximization of `g` on [a, b].
template <typename G>
std::pair<double, double> golden_max(G&& g, double a, double b, int iterations) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double gc = g(c);
  double gd = g(d);
  for (int i = 0; i < iterations; ++i) {
    if (gc >= gd) {
      b = d;
      d = c;
      gd = gc;
      c = b - inv_phi * (b - a);
      gc = g(c);
    } else {
      a = c;
      c = d;
      gc = gd;
      d = a + inv_phi * (b - a);
      gd = g(d);
    }
  }
  return gc >= gd ? std::pair{c, gc} : std::pair{d, gd};
}

void record(BoTrace& trace, Vector lambda, ObjectiveValue value, std::optional<Posterior> post,
            std::optional<GpHyperparameters> hp) {
  const double prev_best = trace.iterations.empty() ? -std::numeric_limits<double>::infinity()
                                                    : trace.iterations.back().best;
  // Strict improvement only: the earliest evaluation wins exact ties.
  if (trace.iterations.empty() || value.total > prev_best) {
    trace.best_index = trace.iterations.size();
    trace.lambda_star = lambda;
  }
  const double best = std::max(prev_best, value.total);
  trace.iterations.push_back({std::move(lambda), value, post, hp, best});
}

ObjectiveValue call(const BlackBox& f, const Vector& x, const BoTrace& trace) {
  try {
    return f(x);
  } catch (const std::exception& e) {
    throw OptimizationError(std::string("objective evaluation failed: ") + e.what(), trace);
  }
}

nlohmann::json vec_json(const Vector& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vector vec_from(const nlohmann::json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

}  // namespace

double matern25_at_distance(double d, double length_scale, double signal_variance) {
  const double r = kSqrt5 * d / length_scale;
  return signal_variance * (1.0 + r + r * r / 3.0) * std::exp(-r);
}

double kernel_matern25(const Vector& a, const Vector& b, double length_scale, double signal_variance) {
  return matern25_at_distance((a - b).norm(), length_scale, signal_variance);
}

GpModel::GpModel(std::vector<Vector> inputs, std::vector<double> targets, GpHyperparameters hp,
                 JitterSchedule schedule)
    : inputs_(std::move(inputs)), targets_(std::move(targets)), hp_(hp) {
  if (inputs_.empty()) throw InvalidArgument("a GP needs at least one observation");
  if (inputs_.size() != targets_.size()) throw StructuralError("GP inputs and targets differ in length");
  if (!(hp_.length_scale > 0.0 && hp_.signal_variance > 0.0))
    throw InvalidArgument("GP length scale and signal variance must be positive");
  for (const auto& x : inputs_)
    if (x.size() != inputs_.front().size()) throw StructuralError("GP inputs differ in dimension");
  auto f = factorize(distance_matrix(inputs_), hp_, schedule);
  if (!f) throw ConditioningError("GP Gram matrix is not positive definite even with maximal jitter");
  chol_ = std::move(f->llt);
  jitter_ = f->jitter;
  alpha_ = chol_.solve(to_vector(targets_));
}

Posterior GpModel::posterior(const Vector& query) const {
  const auto n = static_cast<Eigen::Index>(inputs_.size());
  if (query.size() != inputs_.front().size()) throw StructuralError("GP query has the wrong dimension");
  Vector k(n);
  for (Eigen::Index i = 0; i < n; ++i)
    k(i) = kernel_matern25(query, inputs_[static_cast<std::size_t>(i)], hp_.length_scale, hp_.signal_variance);
  const Vector v = chol_.matrixL().solve(k);
  return {k.dot(alpha_), std::max(hp_.signal_variance - v.squaredNorm(), 0.0)};
}

double GpModel::log_marginal_likelihood() const { return lml_from(chol_, to_vector(targets_)); }

double GpModel::best_target() const { return *std::max_element(targets_.begin(), targets_.end()); }

GpHyperparameters fit_hyperparameters(const std::vector<Vector>& inputs, const std::vector<double>& targets,
                                      const HyperparameterGrid& grid, JitterSchedule schedule) {
  if (inputs.empty() || inputs.size() != targets.size())
    throw InvalidArgument("hyperparameter fit needs matching, nonempty inputs and targets");
  if (grid.points < 1) throw InvalidArgument("hyperparameter grid needs at least one point");
  const Eigen::MatrixXd dist = distance_matrix(inputs);
  const Vector y = to_vector(targets);
  auto log_space = [&](double lo, double hi, int i) {
    if (grid.points == 1) return lo;
    return lo * std::pow(hi / lo, static_cast<double>(i) / (grid.points - 1));
  };
  std::optional<GpHyperparameters> best;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid.points; ++i) {
    for (int k = 0; k < grid.points; ++k) {
      const GpHyperparameters hp{log_space(grid.length_min, grid.length_max, i),
                                 log_space(grid.variance_min, grid.variance_max, k)};
      const auto f = factorize(dist, hp, schedule);
      if (!f) continue;
      const double lml = lml_from(f->llt, y);
      if (std::isfinite(lml) && lml > best_lml) {
        best_lml = lml;
        best = hp;
      }
    }
  }
  if (!best) throw ConditioningError("no hyperparameter grid point gives a positive definite Gram matrix");
  return *best;
}

double expected_improvement(double mean, double variance, double f_best, double xi) {
  const double gain = mean - f_best - xi;
  const double sigma = std::sqrt(std::max(variance, 0.0));
  if (sigma <= 0.0) return std::max(gain, 0.0);
  const double z = gain / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(gain * cdf + sigma * pdf, 0.0);
}

void BoConfig::validate() const {
  if (bounds.empty()) throw InvalidArgument("optimization box has no dimensions");
  for (const auto& [lo, hi] : bounds)
    if (!(lo < hi)) throw InvalidArgument("optimization bounds require lo < hi");
  if (n_init < 1) throw InvalidArgument("n_init must be at least 1");
  if (n_iter < 0) throw InvalidArgument("n_iter must be nonnegative");
  if (!(xi >= 0.0)) throw InvalidArgument("xi must be nonnegative");
  if (n_candidates < 1 || n_restarts < 0) throw InvalidArgument("bad acquisition optimizer settings");
}

Vector propose_next(const GpModel& model, const BoConfig& cfg, std::uint64_t round) {
  cfg.validate();
  const auto dims = cfg.dims();
  if (model.inputs().front().size() != static_cast<Eigen::Index>(dims))
    throw StructuralError("GP dimension does not match the optimization box");
  const double f_best = model.best_target();

  // Cranley-Patterson rotation of a Halton sequence.
  std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (round + 1)));
  std::vector<double> shift(dims);
  std::vector<std::uint64_t> primes(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    shift[d] = unit_draw(rng);
    primes[d] = nth_prime(d);
  }

  std::vector<std::pair<double, Vector>> scored;
  scored.reserve(static_cast<std::size_t>(cfg.n_candidates));
  for (int i = 0; i < cfg.n_candidates; ++i) {
    Vector x(static_cast<Eigen::Index>(dims));
    for (std::size_t d = 0; d < dims; ++d) {
      double u = radical_inverse(static_cast<std::uint64_t>(i) + 1, primes[d]) + shift[d];
      u -= std::floor(u);
      const auto [lo, hi] = cfg.bounds[d];
      x(static_cast<Eigen::Index>(d)) = lo + u * (hi - lo);
    }
    scored.emplace_back(acquisition(model, x, f_best, cfg.xi), std::move(x));
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  Vector best_x = scored.front().second;
  double best_ei = scored.front().first;
  const int restarts = std::min<int>(cfg.n_restarts, static_cast<int>(scored.size()));
  for (int s = 0; s < restarts; ++s) {
    Vector x = scored[static_cast<std::size_t>(s)].second;
    double ei = scored[static_cast<std::size_t>(s)].first;
    for (int sweep = 0; sweep < 4; ++sweep) {
      for (std::size_t d = 0; d < dims; ++d) {
        const auto di = static_cast<Eigen::Index>(d);
        const auto [lo, hi] = cfg.bounds[d];
        const double half = 0.25 * (hi - lo) / std::pow(2.0, sweep);
        const double a = std::max(lo, x(di) - half);
        const double b = std::min(hi, x(di) + half);
        Vector probe = x;
        auto g = [&](double t) {
          probe(di) = t;
          return acquisition(model, probe, f_best, cfg.xi);
        };
        const auto [t, gt] = golden_max(g, a, b, 24);
        if (std::isfinite(gt) && gt > ei) {
          x(di) = std::clamp(t, lo, hi);
          ei = gt;
        }
      }
    }
    if (ei > best_ei) {
      best_ei = ei;
      best_x = x;
    }
  }
  return best_x;
}

BoTrace optimize(const BlackBox& f, const BoConfig& cfg) {
  cfg.validate();
  BoTrace trace;
  trace.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::vector<Vector> xs;
  std::vector<double> ys;
  for (int i = 0; i < cfg.n_init; ++i) {
    Vector x = uniform_point(rng, cfg);
    const ObjectiveValue v = call(f, x, trace);
    xs.push_back(x);
    ys.push_back(v.total);
    record(trace, std::move(x), v, std::nullopt, std::nullopt);
  }
  for (int it = 0; it < cfg.n_iter; ++it) {
    Vector x;
    Posterior post;
    GpHyperparameters hp;
    try {
      hp = fit_hyperparameters(xs, ys, cfg.grid, cfg.jitter);
      const GpModel model(xs, ys, hp, cfg.jitter);
      x = propose_next(model, cfg, static_cast<std::uint64_t>(it));
      post = model.posterior(x);
    } catch (const ConditioningError& e) {
      throw OptimizationError(std::string("surrogate fit failed: ") + e.what(), trace);
    }
    const ObjectiveValue v = call(f, x, trace);
    xs.push_back(x);
    ys.push_back(v.total);
    record(trace, std::move(x), v, post, hp);
  }
  return trace;
}

BoTrace random_search(const BlackBox& f, const BoConfig& cfg) {
  cfg.validate();
  BoTrace trace;
  trace.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  for (int i = 0; i < cfg.n_init + cfg.n_iter; ++i) {
    Vector x = uniform_point(rng, cfg);
    const ObjectiveValue v = call(f, x, trace);
    record(trace, std::move(x), v, std::nullopt, std::nullopt);
  }
  return trace;
}

nlohmann::json to_json(const BoConfig& c) {
  auto bounds = nlohmann::json::array();
  for (const auto& [lo, hi] : c.bounds) bounds.push_back({lo, hi});
  return {{"bounds", bounds},
          {"n_init", c.n_init},
          {"n_iter", c.n_iter},
          {"xi", c.xi},
          {"seed", c.seed},
          {"n_candidates", c.n_candidates},
          {"n_restarts", c.n_restarts},
          {"grid",
           {{"points", c.grid.points},
            {"length", {c.grid.length_min, c.grid.length_max}},
            {"variance", {c.grid.variance_min, c.grid.variance_max}}}},
          {"jitter", {{"initial", c.jitter.initial}, {"max", c.jitter.max}, {"growth", c.jitter.growth}}}};
}

nlohmann::json to_json(const BoTrace& t) {
  auto its = nlohmann::json::array();
  for (const auto& it : t.iterations) {
    nlohmann::json e{{"lambda", vec_json(it.lambda)}, {"objective", to_json(it.objective)}, {"best", it.best}};
    e["posterior"] = it.posterior ? nlohmann::json{{"mean", it.posterior->mean}, {"var", it.posterior->variance}}
                                  : nlohmann::json(nullptr);
    e["gp"] = it.hyperparameters ? nlohmann::json{{"length_scale", it.hyperparameters->length_scale},
                                                  {"signal_variance", it.hyperparameters->signal_variance}}
                                 : nlohmann::json(nullptr);
    its.push_back(std::move(e));
  }
  return {{"config", to_json(t.config)},
          {"iterations", std::move(its)},
          {"lambda_star", vec_json(t.lambda_star)},
          {"best_index", t.best_index}};
}

BoTrace bo_trace_from_json(const nlohmann::json& j) {
  try {
    BoTrace t;
    const auto& c = j.at("config");
    for (const auto& b : c.at("bounds")) t.config.bounds.emplace_back(b.at(0).get<double>(), b.at(1).get<double>());
    t.config.n_init = c.at("n_init").get<int>();
    t.config.n_iter = c.at("n_iter").get<int>();
    t.config.xi = c.at("xi").get<double>();
    t.config.seed = c.at("seed").get<std::uint64_t>();
    t.config.n_candidates = c.value("n_candidates", t.config.n_candidates);
    t.config.n_restarts = c.value("n_restarts", t.config.n_restarts);
    for (const auto& e : j.at("iterations")) {
      BoIteration it;
      it.lambda = vec_from(e.at("lambda"));
      it.objective = objective_value_from_json(e.at("objective"));
      it.best = e.at("best").get<double>();
      if (!e.at("posterior").is_null())
        it.posterior = Posterior{e["posterior"].at("mean").get<double>(), e["posterior"].at("var").get<double>()};
      if (e.contains("gp") && !e.at("gp").is_null())
        it.hyperparameters = GpHyperparameters{e["gp"].at("length_scale").get<double>(),
                                               e["gp"].at("signal_variance").get<double>()};
      t.iterations.push_back(std::move(it));
    }
    t.lambda_star = vec_from(j.at("lambda_star"));
    t.best_index = j.value("best_index", std::size_t{0});
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad optimization trace: ") + e.what());
  }
}

}  // namespace mergeadapt
