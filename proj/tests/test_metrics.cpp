#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mergeadapt/metrics.hpp"

using namespace mergeadapt;

namespace {

// O, E and w built from scratch with plain loops over the pairs.
double brute_force_qwk(const std::vector<RatingPair>& pairs, int lo, int hi) {
  const int c = hi - lo + 1;
  std::vector<std::vector<double>> o(static_cast<std::size_t>(c), std::vector<double>(static_cast<std::size_t>(c), 0.0));
  std::vector<double> h(static_cast<std::size_t>(c), 0.0);
  std::vector<double> p(static_cast<std::size_t>(c), 0.0);
  for (const auto& r : pairs) {
    o[static_cast<std::size_t>(r.human - lo)][static_cast<std::size_t>(r.predicted - lo)] += 1;
    h[static_cast<std::size_t>(r.human - lo)] += 1;
    p[static_cast<std::size_t>(r.predicted - lo)] += 1;
  }
  const double n = static_cast<double>(pairs.size());
  double num = 0.0;
  double den = 0.0;
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / static_cast<double>((c - 1) * (c - 1));
      num += w * o[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      den += w * h[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(j)] / n;
    }
  }
  return 1.0 - num / den;
}

std::vector<RatingPair> random_pairs(std::mt19937_64& rng, int n, int lo, int hi) {
  std::uniform_int_distribution<int> s(lo, hi);
  std::uniform_int_distribution<int> noise(-1, 1);
  std::vector<RatingPair> out;
  for (int i = 0; i < n; ++i) {
    const int h = s(rng);
    out.push_back({h, std::clamp(h + noise(rng) * (i % 3), lo, hi)});
  }
  return out;
}

}  // namespace

TEST_CASE("QWK closed forms") {
  const std::vector<RatingPair> perfect{{0, 0}, {1, 1}, {3, 3}, {2, 2}};
  CHECK(qwk(perfect, ScoreRange(0, 3)) == 1.0);
  const std::vector<RatingPair> flipped{{0, 1}, {1, 0}};
  CHECK(qwk(flipped, ScoreRange(0, 1)) == -1.0);
  // One class on both sides: perfect agreement wins over the zero denominator.
  const std::vector<RatingPair> constant{{2, 2}, {2, 2}, {2, 2}};
  CHECK(qwk(constant, ScoreRange(0, 4)) == 1.0);
}

TEST_CASE("QWK errors") {
  CHECK_THROWS_AS(qwk(std::vector<RatingPair>{}, ScoreRange(0, 3)), InvalidArgument);
  CHECK_THROWS_AS(qwk(std::vector<RatingPair>{{0, 4}}, ScoreRange(0, 3)), InvalidArgument);
}

TEST_CASE("QWK matches the brute-force oracle") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto pairs = random_pairs(rng, 200, 0, 4);
    CHECK(std::fabs(qwk(pairs, ScoreRange(0, 4)) - brute_force_qwk(pairs, 0, 4)) < 1e-12);
  }
}

TEST_CASE("QWK symmetry, shift invariance and streaming") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 30; ++t) {
    auto pairs = random_pairs(rng, 150, 1, 6);
    const double k = qwk(pairs, ScoreRange(1, 6));
    std::vector<RatingPair> swapped;
    std::vector<RatingPair> shifted;
    for (const auto& p : pairs) {
      swapped.push_back({p.predicted, p.human});
      shifted.push_back({p.human + 10, p.predicted + 10});
    }
    CHECK(std::fabs(qwk(swapped, ScoreRange(1, 6)) - k) < 1e-12);
    CHECK(std::fabs(qwk(shifted, ScoreRange(11, 16)) - k) < 1e-12);

    std::shuffle(pairs.begin(), pairs.end(), rng);
    QwkAccumulator acc(ScoreRange(1, 6));
    for (const auto& p : pairs) acc.add(p.human, p.predicted);
    CHECK(acc.count() == pairs.size());
    CHECK(acc.value() == k);
  }
}

TEST_CASE("argmax score mapping") {
  CHECK(score_from_distribution({{0.0, 0.0, 1.0, 0.0, 0.0, 0.0}}, ScoreRange(1, 6)) == 3);
  CHECK(score_from_distribution({{0.25, 0.25, 0.25, 0.25}}, ScoreRange(0, 3)) == 0);
  CHECK(score_from_distribution({{0.1, 0.45, 0.45}}, ScoreRange(2, 4)) == 3);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    ScoreDistribution d{std::vector<double>(7)};
    double s = 0.0;
    for (double& p : d.probs) s += (p = u(rng));
    for (double& p : d.probs) p /= s;
    int arg = 0;
    for (int k = 0; k < 7; ++k)
      if (d.probs[static_cast<std::size_t>(k)] > d.probs[static_cast<std::size_t>(arg)]) arg = k;
    CHECK(score_from_distribution(d, ScoreRange(-3, 3)) == arg - 3);
  }
}
