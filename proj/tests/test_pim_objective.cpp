#include <algorithm>
#include <cmath>
#include <random>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "doctest.h"
#include "mergeadapt/pim_objective.hpp"

using namespace mergeadapt;
using big = boost::multiprecision::cpp_bin_float_50;

namespace {

ScoreDistribution random_simplex(std::mt19937_64& rng, int c) {
  std::exponential_distribution<double> e(1.0);
  ScoreDistribution d{std::vector<double>(static_cast<std::size_t>(c))};
  double s = 0.0;
  for (double& p : d.probs) s += (p = e(rng));
  for (double& p : d.probs) p /= s;
  return d;
}

std::vector<ScoreDistribution> random_batch(std::mt19937_64& rng, int n, int c) {
  std::vector<ScoreDistribution> b;
  for (int i = 0; i < n; ++i) b.push_back(random_simplex(rng, c));
  return b;
}

DiscretePrior uniform_prior(int c) {
  return {std::vector<double>(static_cast<std::size_t>(c), 1.0 / c), ScoreRange(0, c - 1)};
}

// The smoothing constant is part of the quantity being checked.
double big_kl(const ScoreDistribution& p, const std::vector<double>& q, double eps = 1e-12) {
  big s = 0;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (p.probs[i] > 0) s += big(p.probs[i]) * log((big(p.probs[i]) + eps) / (big(q[i]) + eps));
  return s.convert_to<double>();
}

}  // namespace

TEST_CASE("marginal") {
  const std::vector<ScoreDistribution> one{{{0.1, 0.9}}};
  CHECK(marginal(one).probs == one[0].probs);
  const std::vector<ScoreDistribution> two{{{1.0, 0.0}}, {{0.0, 1.0}}};
  CHECK(marginal(two).probs == std::vector<double>{0.5, 0.5});

  std::mt19937_64 rng(1);
  const auto batch = random_batch(rng, 64, 5);
  const auto m = marginal(batch);
  for (std::size_t c = 0; c < 5; ++c) {
    double s = 0.0;
    for (const auto& d : batch) s += d.probs[c];
    CHECK(std::fabs(m.probs[c] - s / 64.0) < 1e-12);
  }
  CHECK_THROWS_AS(marginal(std::vector<ScoreDistribution>{}), InvalidArgument);
  CHECK_THROWS_AS(marginal(std::vector<ScoreDistribution>{{{0.5, 0.5}}, {{0.2, 0.3, 0.5}}}), StructuralError);
}

TEST_CASE("entropy") {
  CHECK(entropy({{0.0, 1.0, 0.0}}) == 0.0);
  CHECK(entropy({{0.25, 0.25, 0.25, 0.25}}) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(std::fabs(entropy({{0.7, 0.2, 0.1}}) - 0.801819) < 1e-5);
  CHECK_THROWS_AS(validate(ScoreDistribution{{0.7, 0.2}}), InvalidArgument);
  CHECK_THROWS_AS(validate(ScoreDistribution{{1.2, -0.2}}), InvalidArgument);
  CHECK_NOTHROW(validate(ScoreDistribution{{0.7, 0.2, 0.1}}));
}

TEST_CASE("KL divergence") {
  const ScoreDistribution p{{0.3, 0.5, 0.2}};
  CHECK(std::fabs(kl_divergence(p, std::vector<double>{0.3, 0.5, 0.2})) < 1e-9);
  CHECK(std::fabs(kl_divergence({{1.0, 0.0}}, std::vector<double>{0.5, 0.5}) - std::log(2.0)) < 1e-10);

  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_simplex(rng, 6);
    const auto b = random_simplex(rng, 6);
    CHECK(std::fabs(kl_divergence(a, b.probs) - big_kl(a, b.probs)) < 1e-10);
  }
  CHECK_THROWS_AS(kl_divergence(p, std::vector<double>{0.5, 0.5}), StructuralError);
}

TEST_CASE("objective closed forms") {
  const DiscretePrior prior{{0.1, 0.2, 0.3, 0.4}, ScoreRange(0, 3)};
  const std::vector<ScoreDistribution> same(10, ScoreDistribution{prior.probs});
  const auto v = evaluate(same, {ObjectiveVariant::kPim, prior});
  CHECK(std::fabs(v.kl_term) < 1e-12);
  CHECK(v.total == doctest::Approx(-entropy({prior.probs})).epsilon(1e-12));
  CHECK(v.n_samples == 10);

  const std::vector<ScoreDistribution> onehot(8, ScoreDistribution{{0.0, 0.0, 1.0, 0.0}});
  CHECK(std::fabs(evaluate(onehot, {ObjectiveVariant::kPim, uniform_prior(4)}).total + std::log(4.0)) < 1e-10);
  CHECK(std::fabs(evaluate(onehot, {ObjectiveVariant::kMiUniform, std::nullopt}).total) < 1e-12);
}

TEST_CASE("ablations drop exactly one term") {
  std::mt19937_64 rng(3);
  const auto batch = random_batch(rng, 64, 5);
  const DiscretePrior prior{random_simplex(rng, 5).probs, ScoreRange(1, 5)};
  const auto full = evaluate(batch, {ObjectiveVariant::kPim, prior});
  const auto no_ent = evaluate(batch, {ObjectiveVariant::kPimNoEntropy, prior});
  const auto no_kl = evaluate(batch, {ObjectiveVariant::kPimNoKl, std::nullopt});
  CHECK(no_ent.total == doctest::Approx(-full.kl_term).epsilon(1e-14));
  CHECK(no_kl.total == doctest::Approx(-full.entropy_term).epsilon(1e-14));
  CHECK(full.total == doctest::Approx(no_ent.total + no_kl.total).epsilon(1e-14));
  CHECK_THROWS_AS(evaluate(batch, {ObjectiveVariant::kPim, std::nullopt}), InvalidArgument);
  CHECK_THROWS_AS(evaluate(batch, {ObjectiveVariant::kPim, uniform_prior(3)}), StructuralError);
}

TEST_CASE("uniform prior differs from the MI estimate by ln C") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + t % 9;
    const auto batch = random_batch(rng, 64, c);
    const double pim = evaluate(batch, {ObjectiveVariant::kPim, uniform_prior(c)}).total;
    const double mi = evaluate(batch, {ObjectiveVariant::kMiUniform, std::nullopt}).total;
    CHECK(std::fabs(pim - (mi - std::log(static_cast<double>(c)))) < 1e-10);
  }
}

TEST_CASE("PIM is nonpositive and order free") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    auto batch = random_batch(rng, 32, 4);
    const DiscretePrior prior{random_simplex(rng, 4).probs, ScoreRange(0, 3)};
    const double a = evaluate(batch, {ObjectiveVariant::kPim, prior}).total;
    CHECK(a <= 0.0);
    std::shuffle(batch.begin(), batch.end(), rng);
    CHECK(std::fabs(evaluate(batch, {ObjectiveVariant::kPim, prior}).total - a) < 1e-12);
  }
}

TEST_CASE("objective value JSON") {
  const ObjectiveValue v{-0.25, 0.1, 0.15, 64};
  const auto j = to_json(v);
  CHECK(j.contains("total"));
  CHECK(j.contains("kl"));
  CHECK(j.contains("ent"));
  const auto back = objective_value_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.total == v.total);
  CHECK(back.kl_term == v.kl_term);
  CHECK(back.entropy_term == v.entropy_term);
  CHECK(back.n_samples == 64);
}
