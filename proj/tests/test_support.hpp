#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "mergeadapt/param_algebra.hpp"

namespace testing_support {

using mergeadapt::Matrix;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

/// Textbook i-j-k product with no Eigen expression machinery.
inline Matrix naive_multiply(const Matrix& x, const Matrix& y) {
  Matrix out(x.rows(), y.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(i, k) * y(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

inline mergeadapt::ParamSet random_base(std::mt19937_64& rng) {
  return mergeadapt::ParamSet({{"W", random_matrix(rng, 5, 7)}, {"b", random_matrix(rng, 5, 1)},
                               {"emb", random_matrix(rng, 4, 4)}});
}

/// Random factors on every layer of `base` except those in `skip`.
inline mergeadapt::TaskVector random_task_vector(std::mt19937_64& rng, const mergeadapt::ParamSet& base,
                                                 const std::vector<std::string>& skip = {}) {
  std::vector<mergeadapt::LowRankUpdate> ups;
  std::uniform_int_distribution<int> rank_draw(1, 3);
  for (const auto& l : base.layers()) {
    if (std::find(skip.begin(), skip.end(), l.name) != skip.end()) continue;
    const Eigen::Index r = std::min<Eigen::Index>(rank_draw(rng), std::min(l.value.rows(), l.value.cols()));
    ups.push_back({l.name, random_matrix(rng, l.value.rows(), r), random_matrix(rng, r, l.value.cols())});
  }
  return mergeadapt::TaskVector(std::move(ups), base.fingerprint());
}

inline double max_abs_diff(const mergeadapt::ParamSet& x, const mergeadapt::ParamSet& y) {
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    d = std::max(d, (x.layers()[i].value - y.layers()[i].value).cwiseAbs().maxCoeff());
  return d;
}

inline bool exactly_equal(const mergeadapt::ParamSet& x, const mergeadapt::ParamSet& y) {
  if (!x.combinable_with(y)) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x.layers()[i].value != y.layers()[i].value) return false;
  return true;
}

}  // namespace testing_support
