#include "mergeadapt/pim_objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mergeadapt {

namespace {

// Neumaier summation; keeps batch reductions independent of order to ~1 ulp.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

bool needs_prior(ObjectiveVariant v) {
  return v == ObjectiveVariant::kPim || v == ObjectiveVariant::kPimNoEntropy;
}

double mean_entropy(std::span<const ScoreDistribution> dists) {
  CompensatedSum s;
  for (const auto& d : dists) s.add(entropy(d));
  return s.value() / static_cast<double>(dists.size());
}

}  // namespace

void validate(const ScoreDistribution& d) {
  CompensatedSum s;
  for (double p : d.probs) {
    if (!std::isfinite(p) || p < 0.0) throw InvalidArgument("distribution has a negative or non-finite entry");
    s.add(p);
  }
  if (d.probs.empty() || std::abs(s.value() - 1.0) > 1e-9)
    throw InvalidArgument("distribution does not sum to 1");
}

ScoreDistribution marginal(std::span<const ScoreDistribution> dists) {
  if (dists.empty()) throw InvalidArgument("marginal of an empty batch");
  const std::size_t c = dists.front().size();
  std::vector<CompensatedSum> acc(c);
  for (const auto& d : dists) {
    if (d.size() != c) throw StructuralError("distributions in a batch have different lengths");
    for (std::size_t k = 0; k < c; ++k) acc[k].add(d.probs[k]);
  }
  ScoreDistribution out{std::vector<double>(c)};
  const auto n = static_cast<double>(dists.size());
  for (std::size_t k = 0; k < c; ++k) out.probs[k] = acc[k].value() / n;
  return out;
}

double entropy(const ScoreDistribution& d) {
  CompensatedSum s;
  for (double p : d.probs)
    if (p > 0.0) s.add(-p * std::log(p));
  return std::max(s.value(), 0.0);
}

double kl_divergence(const ScoreDistribution& p, std::span<const double> q, double epsilon) {
  if (p.size() != q.size())
    throw StructuralError("KL arguments have lengths " + std::to_string(p.size()) + " and " +
                          std::to_string(q.size()));
  CompensatedSum s;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (p.probs[k] > 0.0) s.add(p.probs[k] * std::log((p.probs[k] + epsilon) / (q[k] + epsilon)));
  return std::max(s.value(), 0.0);
}

ObjectiveValue evaluate(std::span<const ScoreDistribution> dists, const ObjectiveConfig& cfg) {
  if (dists.empty()) throw InvalidArgument("objective of an empty batch");
  if (needs_prior(cfg.variant)) {
    if (!cfg.prior) throw InvalidArgument("objective variant requires a prior");
    if (cfg.prior->probs.size() != dists.front().size())
      throw StructuralError("prior length does not match the number of score classes");
  }

  ObjectiveValue v;
  v.n_samples = dists.size();
  const ScoreDistribution m = marginal(dists);
  if (cfg.variant != ObjectiveVariant::kPimNoEntropy) v.entropy_term = mean_entropy(dists);

  switch (cfg.variant) {
    case ObjectiveVariant::kPim:
      v.kl_term = kl_divergence(m, *cfg.prior, cfg.epsilon);
      v.total = -v.kl_term - v.entropy_term;
      break;
    case ObjectiveVariant::kPimNoEntropy:
      v.kl_term = kl_divergence(m, *cfg.prior, cfg.epsilon);
      v.total = -v.kl_term;
      break;
    case ObjectiveVariant::kPimNoKl:
      v.total = -v.entropy_term;
      break;
    case ObjectiveVariant::kMiUniform: {
      // kl_term reports KL(marginal || U) = ln C - H(marginal) for reference.
      const double h = entropy(m);
      v.kl_term = std::max(std::log(static_cast<double>(m.size())) - h, 0.0);
      v.total = h - v.entropy_term;
      break;
    }
  }
  return v;
}

nlohmann::json to_json(const ObjectiveValue& v) {
  return {{"total", v.total}, {"kl", v.kl_term}, {"ent", v.entropy_term}, {"n", v.n_samples}};
}

ObjectiveValue objective_value_from_json(const nlohmann::json& j) {
  try {
    ObjectiveValue v;
    v.total = j.at("total").get<double>();
    v.kl_term = j.at("kl").get<double>();
    v.entropy_term = j.at("ent").get<double>();
    v.n_samples = j.value("n", std::size_t{0});
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad objective document: ") + e.what());
  }
}

}  // namespace mergeadapt
