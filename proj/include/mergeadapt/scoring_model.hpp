#pragma once

// Toy probabilistic scorer standing in for an adapter-tuned language model.
//
// Parameters are one weight layer "W" (C_max x D) and one bias layer "b"
// (C_max x 1) shared by all domains. A domain with C_T classes reads the
// first C_T logits: softmax over all C_max, truncate, renormalize. Source
// training only moves a low-rank update of W and a dense bias update.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergeadapt/param_algebra.hpp"
#include "mergeadapt/pim_objective.hpp"
#include "mergeadapt/score_prior.hpp"

namespace mergeadapt {

using FeatureVector = Vector;

inline constexpr const char* kWeightLayer = "W";
inline constexpr const char* kBiasLayer = "b";

class ProbScorer {
 public:
  /// Throws StructuralError if the layers are missing or inconsistent, or if
  /// active_classes is not in [2, C_max].
  ProbScorer(ParamSet params, int active_classes);

  ScoreDistribution predict(const FeatureVector& x) const;

  const ParamSet& params() const { return params_; }
  int active_classes() const { return active_; }
  int max_classes() const { return static_cast<int>(weight_.rows()); }
  Eigen::Index dim() const { return weight_.cols(); }

 private:
  ParamSet params_;
  Matrix weight_;
  Vector bias_;
  int active_;
};

std::vector<ScoreDistribution> batch_predict(const ProbScorer& scorer, std::span<const FeatureVector> xs);

/// Frozen base parameters: small N(0, scale^2) entries from a fixed seed.
ParamSet make_base_params(int max_classes, Eigen::Index dim, std::uint64_t seed, double scale = 0.05);

struct LabeledSet {
  std::vector<FeatureVector> features;
  std::vector<int> scores;
  ScoreRange range{0, 1};
  std::string domain;

  std::size_t size() const { return features.size(); }
};

/// Features of a target domain without its labels.
struct UnlabeledSet {
  std::vector<FeatureVector> features;
  ScoreRange range{0, 1};
  std::string domain;
};

struct TrainConfig {
  int rank = 4;
  double learning_rate = 0.1;
  int steps = 2000;
  double plateau = 1e-9;
  std::uint64_t seed = 0;
};

/// Trainable adapter state: W update = b_w * a_w, bias update dense.
struct AdapterFactors {
  Matrix b_w;  // C_max x r
  Matrix a_w;  // r x D
  Vector bias;
};

struct LossAndGradient {
  double loss = 0.0;
  AdapterFactors grad;
};

/// Mean cross-entropy of the adapted scorer on `data` and its gradient
/// with respect to every adapter factor.
LossAndGradient adapter_loss_and_gradient(const ParamSet& base, const LabeledSet& data,
                                          const AdapterFactors& f);

TaskVector to_task_vector(const AdapterFactors& f, const Fingerprint& baseline);

class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Full-batch gradient descent on the adapter factors. The returned task
/// vector is the lowest-loss iterate, so its loss never exceeds the loss at
/// initialization.
TaskVector train_source(const ParamSet& base, const LabeledSet& data, const TrainConfig& cfg);

// JSON lines: a header {"range": [a, b], "dim": D, "domain": str} followed by
// one {"x": [...], "y": int | null, "domain": str} per sample.
std::string labeled_to_jsonl(const LabeledSet& set);
std::string unlabeled_to_jsonl(const UnlabeledSet& set);
LabeledSet parse_labeled_jsonl(const std::string& text);
UnlabeledSet parse_unlabeled_jsonl(const std::string& text);

}  // namespace mergeadapt
