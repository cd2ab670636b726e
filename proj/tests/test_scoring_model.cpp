#include <cmath>
#include <random>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "doctest.h"
#include "mergeadapt/scoring_model.hpp"
#include "test_support.hpp"

using namespace mergeadapt;
using testing_support::random_matrix;
using big = boost::multiprecision::cpp_bin_float_50;

namespace {

ParamSet scorer_params(const Matrix& w, const Vector& b) {
  return ParamSet({{kWeightLayer, w}, {kBiasLayer, Matrix(b)}});
}

Vector random_vector(std::mt19937_64& rng, Eigen::Index n) { return random_matrix(rng, n, 1).col(0); }

// Two classes split by a hyperplane through the origin with a margin of 0.5.
LabeledSet separable_set(std::mt19937_64& rng, int n, int dim) {
  const Vector normal = random_vector(rng, dim).normalized();
  LabeledSet s;
  s.range = ScoreRange(0, 1);
  s.domain = "sep";
  while (static_cast<int>(s.size()) < n) {
    const Vector x = 2.0 * random_vector(rng, dim);
    const double side = normal.dot(x);
    if (std::fabs(side) < 0.5) continue;
    s.features.push_back(x);
    s.scores.push_back(side > 0 ? 1 : 0);
  }
  return s;
}

LabeledSet random_labeled(std::mt19937_64& rng, int n, int dim, const ScoreRange& range) {
  std::uniform_int_distribution<int> y(range.lo(), range.hi());
  LabeledSet s;
  s.range = range;
  s.domain = "rand";
  for (int i = 0; i < n; ++i) {
    s.features.push_back(random_vector(rng, dim));
    s.scores.push_back(y(rng));
  }
  return s;
}

double accuracy(const ProbScorer& scorer, const LabeledSet& s) {
  int hit = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto p = scorer.predict(s.features[i]).probs;
    const int guess = p[1] > p[0] ? 1 : 0;
    hit += guess == s.scores[i] - s.range.lo();
  }
  return static_cast<double>(hit) / static_cast<double>(s.size());
}

ParamSet apply(const ParamSet& base, const TaskVector& tv) { return merge(base, {tv}, MergeSpec({1.0})); }

}  // namespace

TEST_CASE("predict closed forms") {
  const ProbScorer zero(scorer_params(Matrix::Zero(4, 3), Vector::Zero(4)), 4);
  for (double p : zero.predict(Vector::Ones(3)).probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  Vector logb(4);
  logb << std::log(1.0), std::log(2.0), std::log(3.0), std::log(4.0);
  const ProbScorer logs(scorer_params(Matrix::Zero(4, 2), logb), 4);
  const auto p = logs.predict(Vector::Zero(2)).probs;
  for (int k = 0; k < 4; ++k) CHECK(std::fabs(p[static_cast<std::size_t>(k)] - 0.1 * (k + 1)) < 1e-15);

  CHECK_THROWS_AS(zero.predict(Vector::Ones(5)), StructuralError);
  CHECK_THROWS_AS(ProbScorer(scorer_params(Matrix::Zero(4, 3), Vector::Zero(4)), 5), StructuralError);
  CHECK_THROWS_AS(ProbScorer(ParamSet({{kWeightLayer, Matrix::Zero(4, 3)}}), 3), StructuralError);
}

TEST_CASE("truncated softmax matches a high precision oracle") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const Matrix w = 3.0 * random_matrix(rng, 6, 4);
    const Vector b = random_vector(rng, 6);
    const Vector x = random_vector(rng, 4);
    const auto got = ProbScorer(scorer_params(w, b), 3).predict(x).probs;

    const Vector logits = w * x + b;
    std::vector<big> e(6);
    big z = 0;
    for (int k = 0; k < 6; ++k) z += (e[static_cast<std::size_t>(k)] = exp(big(logits(k))));
    big head = 0;
    for (int k = 0; k < 3; ++k) head += e[static_cast<std::size_t>(k)] / z;
    for (int k = 0; k < 3; ++k) {
      const double want = (e[static_cast<std::size_t>(k)] / z / head).convert_to<double>();
      CHECK(std::fabs(got[static_cast<std::size_t>(k)] - want) < 1e-12);
    }
  }
}

TEST_CASE("prediction properties") {
  std::mt19937_64 rng(2);
  const Matrix w = random_matrix(rng, 5, 3);
  const Vector b = random_vector(rng, 5);
  const Vector x = random_vector(rng, 3);
  const ProbScorer s(scorer_params(w, b), 5);
  const ProbScorer shifted(scorer_params(w, b.array() + 7.25), 5);
  const auto p = s.predict(x).probs;
  const auto q = shifted.predict(x).probs;
  for (std::size_t k = 0; k < 5; ++k) CHECK(std::fabs(p[k] - q[k]) < 1e-12);

  // Full width is the plain softmax.
  const Vector logits = w * x + b;
  const Vector plain = (logits.array() - logits.maxCoeff()).exp();
  for (std::size_t k = 0; k < 5; ++k)
    CHECK(p[k] == doctest::Approx(plain(static_cast<Eigen::Index>(k)) / plain.sum()).epsilon(1e-15));
}

TEST_CASE("batch prediction is elementwise") {
  std::mt19937_64 rng(3);
  const ProbScorer s(scorer_params(random_matrix(rng, 4, 3), random_vector(rng, 4)), 3);
  CHECK(batch_predict(s, std::vector<FeatureVector>{}).empty());
  std::vector<FeatureVector> xs;
  for (int i = 0; i < 64; ++i) xs.push_back(random_vector(rng, 3));
  const auto out = batch_predict(s, std::span<const FeatureVector>(xs.data(), 1));
  REQUIRE(out.size() == 1);
  CHECK(out[0].probs == s.predict(xs[0]).probs);
  const auto all = batch_predict(s, xs);
  REQUIRE(all.size() == 64);
  for (std::size_t i = 0; i < 64; ++i) CHECK(all[i].probs == s.predict(xs[i]).probs);
}

TEST_CASE("adapter gradient matches central differences") {
  std::mt19937_64 rng(4);
  const ParamSet base = make_base_params(5, 4, 11, 0.3);
  const LabeledSet data = random_labeled(rng, 30, 4, ScoreRange(1, 4));
  AdapterFactors f{0.5 * random_matrix(rng, 5, 2), 0.5 * random_matrix(rng, 2, 4), 0.5 * random_vector(rng, 5)};
  const auto lg = adapter_loss_and_gradient(base, data, f);
  const double h = 1e-5;

  auto check_entry = [&](double& slot, double analytic) {
    const double keep = slot;
    slot = keep + h;
    const double up = adapter_loss_and_gradient(base, data, f).loss;
    slot = keep - h;
    const double down = adapter_loss_and_gradient(base, data, f).loss;
    slot = keep;
    const double numeric = (up - down) / (2.0 * h);
    CHECK(std::fabs(numeric - analytic) / (std::fabs(analytic) + 1e-8) < 1e-4);
  };
  std::uniform_int_distribution<int> row5(0, 4);
  std::uniform_int_distribution<int> row2(0, 1);
  std::uniform_int_distribution<int> col4(0, 3);
  for (int t = 0; t < 5; ++t) {
    const int i = row5(rng);
    const int r = row2(rng);
    const int k = col4(rng);
    check_entry(f.b_w(i, r), lg.grad.b_w(i, r));
    check_entry(f.a_w(r, k), lg.grad.a_w(r, k));
    check_entry(f.bias(i), lg.grad.bias(i));
  }
}

TEST_CASE("training separates a separable set") {
  std::mt19937_64 rng(5);
  const LabeledSet data = separable_set(rng, 200, 3);
  const ParamSet base = make_base_params(2, 3, 12);
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.seed = 9;
  const TaskVector tv = train_source(base, data, cfg);
  CHECK(tv.rank() <= 2);
  CHECK(accuracy(ProbScorer(apply(base, tv), 2), data) >= 0.95);
}

TEST_CASE("training never ends worse than it started") {
  std::mt19937_64 rng(6);
  const ParamSet base = make_base_params(6, 5, 13);
  const LabeledSet data = random_labeled(rng, 80, 5, ScoreRange(0, 3));
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.seed = 3;
  const TaskVector tv = train_source(base, data, cfg);
  const AdapterFactors zero{Matrix::Zero(6, cfg.rank), Matrix::Zero(cfg.rank, 5), Vector::Zero(6)};
  const double before = adapter_loss_and_gradient(base, data, zero).loss;
  const ProbScorer after(apply(base, tv), 4);
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) loss -= std::log(after.predict(data.features[i]).probs[static_cast<std::size_t>(data.scores[i])]);
  CHECK(loss / static_cast<double>(data.size()) <= before + 1e-12);

  // Same seed, same bits.
  const TaskVector again = train_source(base, data, cfg);
  for (std::size_t u = 0; u < tv.updates().size(); ++u) {
    CHECK(tv.updates()[u].b == again.updates()[u].b);
    CHECK(tv.updates()[u].a == again.updates()[u].a);
  }

  // The bias update is a dense column stored as a rank-1 factor.
  bool saw_bias = false;
  for (const auto& u : tv.updates()) {
    if (u.layer == kBiasLayer) {
      saw_bias = true;
      CHECK(u.b.cols() == 1);
      CHECK(u.a.rows() == 1);
    }
  }
  CHECK(saw_bias);
}

TEST_CASE("a base that already fits needs no update") {
  // Labels follow the base scorer's own argmax with a huge gain.
  std::mt19937_64 rng(7);
  Matrix w = Matrix::Zero(2, 2);
  w(1, 0) = 40.0;
  const ParamSet base = scorer_params(w, Vector::Zero(2));
  LabeledSet data;
  data.range = ScoreRange(0, 1);
  for (int i = 0; i < 50; ++i) {
    Vector x = random_vector(rng, 2);
    if (std::fabs(x(0)) < 0.3) x(0) = 0.3 * (x(0) < 0 ? -1 : 1);
    data.features.push_back(x);
    data.scores.push_back(x(0) > 0 ? 1 : 0);
  }
  TrainConfig cfg;
  cfg.rank = 1;
  const TaskVector tv = train_source(base, data, cfg);
  const ParamSet delta = materialize_dense(tv);
  for (const auto& l : delta.layers()) CHECK(l.value.cwiseAbs().maxCoeff() < 0.5);
  CHECK(accuracy(ProbScorer(apply(base, tv), 2), data) == 1.0);
}

TEST_CASE("merged scorers stay normalized") {
  std::mt19937_64 rng(8);
  const ParamSet base = make_base_params(6, 4, 14);
  std::vector<TaskVector> tvs;
  for (int j = 0; j < 3; ++j) {
    TrainConfig cfg;
    cfg.steps = 100;
    cfg.rank = 2;
    cfg.seed = static_cast<std::uint64_t>(j);
    tvs.push_back(train_source(base, random_labeled(rng, 40, 4, ScoreRange(0, 5)), cfg));
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const ProbScorer s(merge(base, tvs, MergeSpec({u(rng), u(rng), u(rng)})), 4);
    const auto d = s.predict(random_vector(rng, 4));
    CHECK_NOTHROW(validate(d));
    CHECK(d.size() == 4);
  }
}

TEST_CASE("JSON lines round trip") {
  std::mt19937_64 rng(9);
  const LabeledSet s = random_labeled(rng, 7, 3, ScoreRange(1, 6));
  const LabeledSet back = parse_labeled_jsonl(labeled_to_jsonl(s));
  CHECK(back.range == s.range);
  CHECK(back.scores == s.scores);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(back.features[i] == s.features[i]);

  const UnlabeledSet u{s.features, s.range, "T"};
  const std::string text = unlabeled_to_jsonl(u);
  CHECK(text.find("null") != std::string::npos);
  const UnlabeledSet ub = parse_unlabeled_jsonl(text);
  CHECK(ub.features.size() == 7);
  CHECK_THROWS_AS(parse_labeled_jsonl(text), FormatError);
  CHECK_THROWS_AS(parse_labeled_jsonl("{not json"), FormatError);
}
