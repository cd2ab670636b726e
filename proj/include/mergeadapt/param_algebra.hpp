#pragma once

// Parameter sets, low-rank task vectors and weighted merging.
//
// A task vector is the update a fine-tuned model applies on top of a shared
// base. It is kept in factored form (B: m x r, A: r x n per layer) and is
// never densified during merging: the merged update of a layer is
// accumulated as sum_j lambda_j * (B_j A_j).

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "mergeadapt/errors.hpp"

namespace mergeadapt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct LayerShape {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

/// Structural signature: ordered layer names and shapes. Compared byte-exact.
using Fingerprint = std::vector<LayerShape>;

struct Layer {
  std::string name;
  Matrix value;
};

class ParamSet {
 public:
  ParamSet() = default;
  /// Throws StructuralError on duplicate layer names.
  explicit ParamSet(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const { return layers_; }
  const Fingerprint& fingerprint() const { return fingerprint_; }
  std::size_t size() const { return layers_.size(); }

  /// Index of the named layer; throws StructuralError when absent.
  std::size_t index_of(const std::string& name) const;
  const Matrix& layer(const std::string& name) const { return layers_[index_of(name)].value; }

  /// Same fingerprint, every entry zero.
  ParamSet zeros_like() const;

  bool combinable_with(const ParamSet& other) const { return fingerprint_ == other.fingerprint_; }

 private:
  std::vector<Layer> layers_;
  Fingerprint fingerprint_;
};

struct LowRankUpdate {
  std::string layer;
  Matrix b;  // m x r
  Matrix a;  // r x n
};

class TaskVector {
 public:
  TaskVector() = default;
  /// Validates every factor pair against `baseline`: shapes of B*A must match
  /// the named layer, inner dimensions must agree and r <= min(m, n).
  TaskVector(std::vector<LowRankUpdate> updates, Fingerprint baseline);

  const std::vector<LowRankUpdate>& updates() const { return updates_; }
  const Fingerprint& baseline_fingerprint() const { return baseline_; }
  /// Largest factor rank across updates (0 when empty).
  Eigen::Index rank() const;

 private:
  std::vector<LowRankUpdate> updates_;
  Fingerprint baseline_;
};

class MergeSpec {
 public:
  MergeSpec() = default;
  /// Throws InvalidArgument if lo >= hi or any coefficient lies outside [lo, hi].
  explicit MergeSpec(std::vector<double> coefficients, double lo = 0.0, double hi = 1.0);

  static MergeSpec uniform(std::size_t m, double value, double lo = 0.0, double hi = 1.0) {
    return MergeSpec(std::vector<double>(m, value), lo, hi);
  }

  const std::vector<double>& coefficients() const { return coefficients_; }
  std::pair<double, double> bounds() const { return {lo_, hi_}; }
  std::size_t size() const { return coefficients_.size(); }

 private:
  std::vector<double> coefficients_;
  double lo_ = 0.0;
  double hi_ = 1.0;
};

/// Per-layer dense B*A in baseline layer order; layers without an update are zero.
ParamSet materialize_dense(const TaskVector& tv);

/// base + sum_j lambda_j tau_j.
ParamSet merge(const ParamSet& base, const std::vector<TaskVector>& tvs, const MergeSpec& spec);

/// Parameter averaging of the fine-tuned models (lambda_j = 1/M).
ParamSet merge_average(const ParamSet& base, const std::vector<TaskVector>& tvs);

/// Task Arithmetic: every coefficient equal to `scale`.
ParamSet merge_task_arithmetic(const ParamSet& base, const std::vector<TaskVector>& tvs,
                               double scale = 0.4);

/// TIES-Merging: trim to the top `density` fraction by magnitude per source,
/// elect a sign per coordinate, take the disjoint mean, add `scale` times it.
ParamSet merge_ties(const ParamSet& base, const std::vector<TaskVector>& tvs,
                    double density = 1.0, double scale = 1.0);

// JSON documents. Doubles are written in shortest round-trip form.
nlohmann::json to_json(const Fingerprint& fp);
Fingerprint fingerprint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ParamSet& p);
ParamSet param_set_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TaskVector& tv);
TaskVector task_vector_from_json(const nlohmann::json& j);

}  // namespace mergeadapt
