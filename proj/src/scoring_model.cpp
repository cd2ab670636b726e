#include "mergeadapt/scoring_model.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace mergeadapt {

namespace {

// Row-wise truncated softmax over the first `c` columns of `logits`.
Matrix truncated_softmax_rows(const Matrix& logits, int c) {
  Matrix p = logits.leftCols(c);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Matrix stack_features(const LabeledSet& data) {
  const Eigen::Index d = data.features.front().size();
  Matrix x(static_cast<Eigen::Index>(data.size()), d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.features[i].size() != d) throw StructuralError("feature dimensions differ within a set");
    x.row(static_cast<Eigen::Index>(i)) = data.features[i].transpose();
  }
  return x;
}

struct Batch {
  Matrix x;
  std::vector<int> labels;  // class indices
  int classes;
};

Batch make_batch(const ParamSet& base, const LabeledSet& data) {
  if (data.size() == 0) throw InvalidArgument("cannot train on an empty set");
  if (data.scores.size() != data.size()) throw StructuralError("labeled set has mismatched lengths");
  const Matrix& w = base.layer(kWeightLayer);
  if (data.range.classes() > w.rows())
    throw StructuralError("domain has more classes than the scorer's logit space");
  Batch b{stack_features(data), {}, data.range.classes()};
  if (b.x.cols() != w.cols()) throw StructuralError("feature dimension does not match the scorer");
  b.labels.reserve(data.size());
  for (int y : data.scores) {
    if (!data.range.contains(y)) throw InvalidArgument("label outside the domain's score range");
    b.labels.push_back(y - data.range.lo());
  }
  return b;
}

LossAndGradient loss_and_gradient(const ParamSet& base, const Batch& batch, const AdapterFactors& f) {
  const Matrix w = base.layer(kWeightLayer) + f.b_w * f.a_w;
  const Vector bias = base.layer(kBiasLayer).col(0) + f.bias;
  Matrix logits = batch.x * w.transpose();
  logits.rowwise() += bias.transpose();
  Matrix p = truncated_softmax_rows(logits, batch.classes);

  const auto n = static_cast<double>(batch.labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    loss -= std::log(p(row, batch.labels[i]));
    p(row, batch.labels[i]) -= 1.0;
  }
  loss /= n;
  p /= n;  // dLoss / dlogits for the active columns

  Matrix grad_w = Matrix::Zero(w.rows(), w.cols());
  grad_w.topRows(batch.classes).noalias() = p.transpose() * batch.x;
  LossAndGradient out;
  out.loss = loss;
  out.grad.b_w.noalias() = grad_w * f.a_w.transpose();
  out.grad.a_w.noalias() = f.b_w.transpose() * grad_w;
  out.grad.bias = Vector::Zero(w.rows());
  out.grad.bias.head(batch.classes) = p.colwise().sum().transpose();
  return out;
}

void check_scorer_layers(const ParamSet& p) {
  const Matrix& w = p.layer(kWeightLayer);
  const Matrix& b = p.layer(kBiasLayer);
  if (b.rows() != w.rows() || b.cols() != 1)
    throw StructuralError("bias layer must be C_max x 1 matching the weight layer");
}

nlohmann::json vector_json(const FeatureVector& v) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

struct JsonlHeader {
  ScoreRange range;
  Eigen::Index dim;
  std::string domain;
};

template <typename OnRecord>
JsonlHeader parse_jsonl(const std::string& text, OnRecord&& on_record) {
  std::istringstream in(text);
  std::string line;
  std::optional<JsonlHeader> header;
  std::size_t lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (!header) {
        const auto& r = j.at("range");
        header = JsonlHeader{ScoreRange(r.at(0).get<int>(), r.at(1).get<int>()), j.at("dim").get<Eigen::Index>(),
                             j.value("domain", std::string{})};
        continue;
      }
      const auto& xs = j.at("x");
      if (static_cast<Eigen::Index>(xs.size()) != header->dim)
        throw FormatError("line " + std::to_string(lineno) + ": feature length does not match header dim");
      FeatureVector x(header->dim);
      for (Eigen::Index i = 0; i < header->dim; ++i) x(i) = xs[static_cast<std::size_t>(i)].get<double>();
      const auto& y = j.at("y");
      on_record(std::move(x), y.is_null() ? std::optional<int>{} : std::optional<int>{y.get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
  }
  if (!header) throw FormatError("JSONL document has no header line");
  return *header;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

}  // namespace

ProbScorer::ProbScorer(ParamSet params, int active_classes)
    : params_(std::move(params)), active_(active_classes) {
  check_scorer_layers(params_);
  weight_ = params_.layer(kWeightLayer);
  bias_ = params_.layer(kBiasLayer).col(0);
  if (active_ < 2 || active_ > weight_.rows())
    throw StructuralError("active class count " + std::to_string(active_) + " outside [2, C_max]");
}

ScoreDistribution ProbScorer::predict(const FeatureVector& x) const {
  if (x.size() != weight_.cols())
    throw StructuralError("feature dimension " + std::to_string(x.size()) + " does not match scorer dimension " +
                          std::to_string(weight_.cols()));
  const Vector logits = weight_.topRows(active_) * x + bias_.head(active_);
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp();
  e /= e.sum();
  return {std::vector<double>(e.data(), e.data() + e.size())};
}

std::vector<ScoreDistribution> batch_predict(const ProbScorer& scorer, std::span<const FeatureVector> xs) {
  std::vector<ScoreDistribution> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(scorer.predict(x));
  return out;
}

ParamSet make_base_params(int max_classes, Eigen::Index dim, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Matrix w(max_classes, dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index k = 0; k < w.cols(); ++k) w(i, k) = normal(rng);
  Matrix b(max_classes, 1);
  for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = normal(rng);
  return ParamSet({{kWeightLayer, std::move(w)}, {kBiasLayer, std::move(b)}});
}

LossAndGradient adapter_loss_and_gradient(const ParamSet& base, const LabeledSet& data,
                                          const AdapterFactors& f) {
  check_scorer_layers(base);
  return loss_and_gradient(base, make_batch(base, data), f);
}

TaskVector to_task_vector(const AdapterFactors& f, const Fingerprint& baseline) {
  Matrix bias_b = f.bias;
  Matrix bias_a = Matrix::Ones(1, 1);
  return TaskVector({{kWeightLayer, f.b_w, f.a_w}, {kBiasLayer, std::move(bias_b), std::move(bias_a)}}, baseline);
}

TaskVector train_source(const ParamSet& base, const LabeledSet& data, const TrainConfig& cfg) {
  check_scorer_layers(base);
  const Batch batch = make_batch(base, data);
  const Matrix& w = base.layer(kWeightLayer);
  if (cfg.rank < 1 || cfg.rank > std::min(w.rows(), w.cols()))
    throw InvalidArgument("adapter rank must lie in [1, min(C_max, D)]");

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(w.cols())));
  AdapterFactors f{Matrix::Zero(w.rows(), cfg.rank), Matrix(cfg.rank, w.cols()), Vector::Zero(w.rows())};
  for (Eigen::Index i = 0; i < f.a_w.rows(); ++i)
    for (Eigen::Index k = 0; k < f.a_w.cols(); ++k) f.a_w(i, k) = normal(rng);

  AdapterFactors best = f;
  double best_loss = std::numeric_limits<double>::infinity();
  double prev_loss = std::numeric_limits<double>::infinity();
  for (int step = 0; step <= cfg.steps; ++step) {
    const LossAndGradient lg = loss_and_gradient(base, batch, f);
    if (!std::isfinite(lg.loss))
      throw DivergenceError("training loss became non-finite at step " + std::to_string(step));
    if (lg.loss < best_loss) {
      best_loss = lg.loss;
      best = f;
    }
    if (step == cfg.steps || std::abs(prev_loss - lg.loss) < cfg.plateau) break;
    prev_loss = lg.loss;
    f.b_w -= cfg.learning_rate * lg.grad.b_w;
    f.a_w -= cfg.learning_rate * lg.grad.a_w;
    f.bias -= cfg.learning_rate * lg.grad.bias;
  }
  return to_task_vector(best, base.fingerprint());
}

std::string labeled_to_jsonl(const LabeledSet& set) {
  const Eigen::Index dim = set.features.empty() ? 0 : set.features.front().size();
  std::vector<std::string> lines;
  lines.push_back(nlohmann::json{{"range", {set.range.lo(), set.range.hi()}}, {"dim", dim}, {"domain", set.domain}}.dump());
  for (std::size_t i = 0; i < set.size(); ++i)
    lines.push_back(nlohmann::json{{"x", vector_json(set.features[i])}, {"y", set.scores[i]}, {"domain", set.domain}}.dump());
  return join_lines(lines);
}

std::string unlabeled_to_jsonl(const UnlabeledSet& set) {
  const Eigen::Index dim = set.features.empty() ? 0 : set.features.front().size();
  std::vector<std::string> lines;
  lines.push_back(nlohmann::json{{"range", {set.range.lo(), set.range.hi()}}, {"dim", dim}, {"domain", set.domain}}.dump());
  for (const auto& x : set.features)
    lines.push_back(nlohmann::json{{"x", vector_json(x)}, {"y", nullptr}, {"domain", set.domain}}.dump());
  return join_lines(lines);
}

LabeledSet parse_labeled_jsonl(const std::string& text) {
  LabeledSet set;
  const auto header = parse_jsonl(text, [&](FeatureVector x, std::optional<int> y) {
    if (!y) throw FormatError("labeled set contains a sample without a score");
    set.features.push_back(std::move(x));
    set.scores.push_back(*y);
  });
  set.range = header.range;
  set.domain = header.domain;
  for (int y : set.scores)
    if (!set.range.contains(y)) throw FormatError("score outside the header range");
  return set;
}

UnlabeledSet parse_unlabeled_jsonl(const std::string& text) {
  UnlabeledSet set;
  const auto header = parse_jsonl(text, [&](FeatureVector x, std::optional<int>) { set.features.push_back(std::move(x)); });
  set.range = header.range;
  set.domain = header.domain;
  return set;
}

}  // namespace mergeadapt
