#include "mergeadapt/param_algebra.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace mergeadapt {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

void check_combinable(const ParamSet& base, const std::vector<TaskVector>& tvs) {
  for (std::size_t j = 0; j < tvs.size(); ++j) {
    if (tvs[j].baseline_fingerprint() != base.fingerprint()) {
      throw StructuralError("task vector " + std::to_string(j) +
                            " was built against a different parameter fingerprint");
    }
  }
}

nlohmann::json matrix_data(const Matrix& m) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) arr.push_back(m(i, k));
  return arr;
}

Matrix matrix_from(const nlohmann::json& shape, const nlohmann::json& data) {
  if (!shape.is_array() || shape.size() != 2 || !data.is_array())
    throw FormatError("matrix entry needs a [rows, cols] shape and a data array");
  const auto rows = shape[0].get<Eigen::Index>();
  const auto cols = shape[1].get<Eigen::Index>();
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw FormatError("matrix data length does not match shape " + shape_str(rows, cols));
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[k++].get<double>();
  return m;
}

}  // namespace

ParamSet::ParamSet(std::vector<Layer> layers) : layers_(std::move(layers)) {
  std::set<std::string> seen;
  fingerprint_.reserve(layers_.size());
  for (const auto& l : layers_) {
    if (!seen.insert(l.name).second) throw StructuralError("duplicate layer name '" + l.name + "'");
    fingerprint_.push_back({l.name, l.value.rows(), l.value.cols()});
  }
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].name == name) return i;
  throw StructuralError("no layer named '" + name + "'");
}

ParamSet ParamSet::zeros_like() const {
  std::vector<Layer> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back({l.name, Matrix::Zero(l.value.rows(), l.value.cols())});
  return ParamSet(std::move(out));
}

TaskVector::TaskVector(std::vector<LowRankUpdate> updates, Fingerprint baseline)
    : updates_(std::move(updates)), baseline_(std::move(baseline)) {
  std::set<std::string> seen;
  for (const auto& u : updates_) {
    auto it = std::find_if(baseline_.begin(), baseline_.end(),
                           [&](const LayerShape& s) { return s.name == u.layer; });
    if (it == baseline_.end())
      throw StructuralError("update targets unknown layer '" + u.layer + "'");
    if (!seen.insert(u.layer).second)
      throw StructuralError("layer '" + u.layer + "' has more than one update");
    if (u.b.cols() != u.a.rows())
      throw StructuralError("factor inner dimensions disagree for '" + u.layer + "': B is " +
                            shape_str(u.b.rows(), u.b.cols()) + ", A is " +
                            shape_str(u.a.rows(), u.a.cols()));
    if (u.b.rows() != it->rows || u.a.cols() != it->cols)
      throw StructuralError("B*A for '" + u.layer + "' is " + shape_str(u.b.rows(), u.a.cols()) +
                            " but the layer is " + shape_str(it->rows, it->cols));
    const auto r = u.b.cols();
    if (r < 1 || r > std::min(it->rows, it->cols))
      throw StructuralError("rank " + std::to_string(r) + " invalid for layer '" + u.layer + "'");
  }
}

Eigen::Index TaskVector::rank() const {
  Eigen::Index r = 0;
  for (const auto& u : updates_) r = std::max(r, u.b.cols());
  return r;
}

MergeSpec::MergeSpec(std::vector<double> coefficients, double lo, double hi)
    : coefficients_(std::move(coefficients)), lo_(lo), hi_(hi) {
  if (!(lo_ < hi_)) throw InvalidArgument("merge bounds require lo < hi");
  for (std::size_t j = 0; j < coefficients_.size(); ++j) {
    const double c = coefficients_[j];
    if (!std::isfinite(c) || c < lo_ || c > hi_)
      throw InvalidArgument("coefficient " + std::to_string(j) + " = " + std::to_string(c) +
                            " outside bounds");
  }
}

ParamSet materialize_dense(const TaskVector& tv) {
  std::vector<Layer> layers;
  layers.reserve(tv.baseline_fingerprint().size());
  for (const auto& s : tv.baseline_fingerprint()) {
    Matrix dense = Matrix::Zero(s.rows, s.cols);
    for (const auto& u : tv.updates())
      if (u.layer == s.name) dense.noalias() = u.b * u.a;
    layers.push_back({s.name, std::move(dense)});
  }
  return ParamSet(std::move(layers));
}

ParamSet merge(const ParamSet& base, const std::vector<TaskVector>& tvs, const MergeSpec& spec) {
  check_combinable(base, tvs);
  if (tvs.size() != spec.size())
    throw StructuralError("got " + std::to_string(tvs.size()) + " task vectors but " +
                          std::to_string(spec.size()) + " coefficients");
  std::vector<Layer> layers(base.layers().begin(), base.layers().end());
  for (std::size_t j = 0; j < tvs.size(); ++j) {
    const double lambda = spec.coefficients()[j];
    if (lambda == 0.0) continue;
    for (const auto& u : tvs[j].updates())
      layers[base.index_of(u.layer)].value.noalias() += lambda * (u.b * u.a);
  }
  return ParamSet(std::move(layers));
}

ParamSet merge_average(const ParamSet& base, const std::vector<TaskVector>& tvs) {
  if (tvs.empty()) throw InvalidArgument("averaging needs at least one task vector");
  return merge(base, tvs, MergeSpec::uniform(tvs.size(), 1.0 / static_cast<double>(tvs.size())));
}

ParamSet merge_task_arithmetic(const ParamSet& base, const std::vector<TaskVector>& tvs,
                               double scale) {
  const double lo = std::min(0.0, scale);
  const double hi = std::max(1.0, scale);
  return merge(base, tvs, MergeSpec::uniform(tvs.size(), scale, lo, hi));
}

ParamSet merge_ties(const ParamSet& base, const std::vector<TaskVector>& tvs, double density,
                    double scale) {
  if (!(density > 0.0 && density <= 1.0)) throw InvalidArgument("TIES density must lie in (0, 1]");
  if (tvs.empty()) throw InvalidArgument("TIES needs at least one task vector");
  check_combinable(base, tvs);

  // Flatten each densified task vector into one coordinate space.
  std::size_t n = 0;
  for (const auto& l : base.layers()) n += static_cast<std::size_t>(l.value.size());
  std::vector<std::vector<double>> flat;
  flat.reserve(tvs.size());
  for (const auto& tv : tvs) {
    const ParamSet dense = materialize_dense(tv);
    std::vector<double> v;
    v.reserve(n);
    for (const auto& l : dense.layers())
      for (Eigen::Index i = 0; i < l.value.rows(); ++i)
        for (Eigen::Index c = 0; c < l.value.cols(); ++c) v.push_back(l.value(i, c));
    flat.push_back(std::move(v));
  }

  // Trim: keep the ceil(density * n) largest magnitudes per source.
  const auto keep = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n)));
  for (auto& v : flat) {
    if (keep >= n) break;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return std::abs(v[x]) > std::abs(v[y]); });
    for (std::size_t k = keep; k < n; ++k) v[order[k]] = 0.0;
  }

  std::vector<double> merged(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (const auto& v : flat) total += v[i];
    // Sum of signed values decides which sign carries more mass; ties go positive.
    const double sign = total < 0.0 ? -1.0 : 1.0;
    double sum = 0.0;
    int count = 0;
    for (const auto& v : flat) {
      if (v[i] != 0.0 && (v[i] > 0.0) == (sign > 0.0)) {
        sum += v[i];
        ++count;
      }
    }
    merged[i] = count > 0 ? sum / count : 0.0;
  }

  std::vector<Layer> layers(base.layers().begin(), base.layers().end());
  std::size_t k = 0;
  for (auto& l : layers)
    for (Eigen::Index i = 0; i < l.value.rows(); ++i)
      for (Eigen::Index c = 0; c < l.value.cols(); ++c) l.value(i, c) += scale * merged[k++];
  return ParamSet(std::move(layers));
}

nlohmann::json to_json(const Fingerprint& fp) {
  auto arr = nlohmann::json::array();
  for (const auto& s : fp) arr.push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  return arr;
}

Fingerprint fingerprint_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("fingerprint must be an array");
  Fingerprint fp;
  for (const auto& e : j) {
    const auto& shape = e.at("shape");
    fp.push_back({e.at("name").get<std::string>(), shape.at(0).get<Eigen::Index>(),
                  shape.at(1).get<Eigen::Index>()});
  }
  return fp;
}

nlohmann::json to_json(const ParamSet& p) {
  auto layers = nlohmann::json::array();
  for (const auto& l : p.layers())
    layers.push_back({{"name", l.name}, {"shape", {l.value.rows(), l.value.cols()}}, {"data", matrix_data(l.value)}});
  return {{"fingerprint", to_json(p.fingerprint())}, {"layers", std::move(layers)}};
}

ParamSet param_set_from_json(const nlohmann::json& j) {
  try {
    std::vector<Layer> layers;
    for (const auto& e : j.at("layers"))
      layers.push_back({e.at("name").get<std::string>(), matrix_from(e.at("shape"), e.at("data"))});
    ParamSet p(std::move(layers));
    if (p.fingerprint() != fingerprint_from_json(j.at("fingerprint")))
      throw FormatError("stored fingerprint disagrees with layer shapes");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad parameter-set document: ") + e.what());
  }
}

nlohmann::json to_json(const TaskVector& tv) {
  auto updates = nlohmann::json::array();
  for (const auto& u : tv.updates()) {
    updates.push_back({{"name", u.layer},
                       {"shape", {u.b.rows(), u.a.cols()}},
                       {"rank", u.b.cols()},
                       {"B", matrix_data(u.b)},
                       {"A", matrix_data(u.a)}});
  }
  return {{"fingerprint", to_json(tv.baseline_fingerprint())}, {"updates", std::move(updates)}};
}

TaskVector task_vector_from_json(const nlohmann::json& j) {
  try {
    std::vector<LowRankUpdate> updates;
    for (const auto& e : j.at("updates")) {
      const auto m = e.at("shape").at(0).get<Eigen::Index>();
      const auto n = e.at("shape").at(1).get<Eigen::Index>();
      const auto r = e.at("rank").get<Eigen::Index>();
      updates.push_back({e.at("name").get<std::string>(), matrix_from(nlohmann::json{m, r}, e.at("B")),
                         matrix_from(nlohmann::json{r, n}, e.at("A"))});
    }
    return TaskVector(std::move(updates), fingerprint_from_json(j.at("fingerprint")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad task-vector document: ") + e.what());
  }
}

}  // namespace mergeadapt
