#include "mergeadapt/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "mergeadapt/metrics.hpp"

namespace mergeadapt {

namespace fs_ = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kSourcesIndex = "data/sources.json";
constexpr const char* kTargetFeatures = "data/target_features.jsonl";
constexpr const char* kTargetLabels = "data/target_labels.json";
constexpr const char* kBaseParams = "models/base.json";
constexpr const char* kMetrics = "metrics.csv";

double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Vector gaussian_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = normal(rng);
  return v;
}

Vector random_unit(std::mt19937_64& rng, int dim) {
  Vector v = gaussian_vector(rng, dim);
  return v / v.norm();
}

LabeledSet sample_domain(std::mt19937_64& rng, const ExperimentConfig& cfg, const Vector& direction,
                         double offset, const Vector& mean, const ScoreRange& range, int n, std::string domain) {
  LabeledSet set;
  set.range = range;
  set.domain = std::move(domain);
  const int classes = range.classes();
  for (int i = 0; i < n; ++i) {
    const Vector z = gaussian_vector(rng, cfg.dim);
    const double u = 1.0 / (1.0 + std::exp(-(cfg.latent_gain * direction.dot(z) + offset)));
    int idx = std::min(classes - 1, static_cast<int>(std::floor(u * classes)));
    if (unit_draw(rng) < cfg.label_noise) idx += unit_draw(rng) < 0.5 ? -1 : 1;
    idx = std::clamp(idx, 0, classes - 1);
    set.features.push_back(mean + z);
    set.scores.push_back(range.lo() + idx);
  }
  return set;
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

nlohmann::json read_json(FileSystem& fs, const fs_::path& p) {
  try {
    return nlohmann::json::parse(fs.read(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string task_vector_path(int j) { return "models/task_vector_" + std::to_string(j) + ".json"; }
std::string statistics_path(int j) { return "stats/source_" + std::to_string(j) + ".json"; }
std::string source_data_path(int j) { return "data/source_" + std::to_string(j) + ".jsonl"; }
std::string adapt_path(Method m, std::uint64_t seed) {
  return "adapt/" + method_name(m) + "_seed" + std::to_string(seed) + ".json";
}

std::vector<LabeledSet> load_sources(const ExperimentConfig& cfg, FileSystem& fs) {
  const auto index = read_json(fs, cfg.out_dir / kSourcesIndex);
  std::vector<LabeledSet> sources;
  for (const auto& p : index.at("sources")) sources.push_back(parse_labeled_jsonl(fs.read(cfg.out_dir / p.get<std::string>())));
  if (static_cast<int>(sources.size()) != cfg.n_sources)
    throw FormatError("source index lists " + std::to_string(sources.size()) + " datasets, config expects " +
                      std::to_string(cfg.n_sources));
  return sources;
}

SourceStatistics statistics_for(const LabeledSet& s) {
  return compute_statistics(s.domain, s.scores, s.range);
}

LabeledSet load_labeled_target(const RunManifest& m, const ExperimentConfig& cfg, FileSystem& fs) {
  UnlabeledSet features = parse_unlabeled_jsonl(fs.read(cfg.out_dir / m.target_features));
  const auto labels = read_json(fs, cfg.out_dir / m.target_labels);
  LabeledSet set;
  set.range = features.range;
  set.domain = features.domain;
  set.features = std::move(features.features);
  set.scores = labels.at("y").get<std::vector<int>>();
  if (set.scores.size() != set.features.size()) throw FormatError("target labels and features differ in count");
  return set;
}

ObjectiveConfig objective_for(Method m, const DiscretePrior& prior) {
  switch (m) {
    case Method::kPim:
    case Method::kRandomSearch:
      return {ObjectiveVariant::kPim, prior};
    case Method::kPimUniformPrior:
      return {ObjectiveVariant::kMiUniform, std::nullopt};
    case Method::kPimNoEntropy:
      return {ObjectiveVariant::kPimNoEntropy, prior};
    case Method::kPimNoKl:
      return {ObjectiveVariant::kPimNoKl, std::nullopt};
    default:
      throw InvalidArgument("method " + method_name(m) + " has no objective");
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

// ---------------------------------------------------------------- files

std::string DiskFileSystem::read(const fs_::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void DiskFileSystem::write(const fs_::path& path, const std::string& content) {
  if (path.has_parent_path()) fs_::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("failed writing " + path.string());
}

bool DiskFileSystem::exists(const fs_::path& path) { return fs_::exists(path); }

// ---------------------------------------------------------------- config

int ExperimentConfig::logit_space() const {
  if (max_classes > 0) return max_classes;
  int c = target_range.classes();
  for (const auto& r : source_ranges) c = std::max(c, r.classes());
  return c;
}

void ExperimentConfig::validate() const {
  if (n_sources < 1) throw InvalidArgument("need at least one source");
  if (n_adversarial < 0 || n_adversarial >= n_sources)
    throw InvalidArgument("adversarial source count must be in [0, n_sources)");
  if (dim < 1) throw InvalidArgument("feature dimension must be positive");
  if (samples_per_source < 2 || target_samples < 1) throw InvalidArgument("too few samples per domain");
  if (source_ranges.empty()) throw InvalidArgument("no source score ranges");
  if (mean_shift < 0.0 || concept_perturbation < 0.0 || target_novel_shift < 0.0 || latent_gain <= 0.0)
    throw InvalidArgument("shift parameters must be nonnegative (gain positive)");
  if (label_noise < 0.0 || label_noise > 1.0) throw InvalidArgument("label noise must be a probability");
  if (target_blend.empty()) throw InvalidArgument("target blend needs at least one source concept");
  for (int j : target_blend)
    if (j < 0 || j >= n_sources - n_adversarial)
      throw InvalidArgument("target blend must reference non-adversarial sources");
  const int space = logit_space();
  if (target_range.classes() > space) throw InvalidArgument("target range exceeds the logit space");
  for (const auto& r : source_ranges)
    if (r.classes() > space) throw InvalidArgument("source range exceeds the logit space");
  if (train.rank < 1 || train.rank > std::min(space, dim)) throw InvalidArgument("adapter rank out of range");
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (seeds.empty()) throw InvalidArgument("at least one seed is required");
  if (!(ties_density > 0.0 && ties_density <= 1.0)) throw InvalidArgument("TIES density must lie in (0, 1]");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  auto ranges = nlohmann::json::array();
  for (const auto& r : c.source_ranges) ranges.push_back({r.lo(), r.hi()});
  return {{"n_sources", c.n_sources},
          {"dim", c.dim},
          {"samples_per_source", c.samples_per_source},
          {"target_samples", c.target_samples},
          {"source_ranges", ranges},
          {"target_range", {c.target_range.lo(), c.target_range.hi()}},
          {"target_id", c.target_id},
          {"n_adversarial", c.n_adversarial},
          {"mean_shift", c.mean_shift},
          {"concept_perturbation", c.concept_perturbation},
          {"latent_gain", c.latent_gain},
          {"latent_offset", c.latent_offset},
          {"label_noise", c.label_noise},
          {"target_blend", c.target_blend},
          {"target_novel_shift", c.target_novel_shift},
          {"max_classes", c.max_classes},
          {"base_scale", c.base_scale},
          {"train",
           {{"rank", c.train.rank},
            {"learning_rate", c.train.learning_rate},
            {"steps", c.train.steps},
            {"plateau", c.train.plateau}}},
          {"bo",
           {{"n_init", c.bo.n_init},
            {"n_iter", c.bo.n_iter},
            {"xi", c.bo.xi},
            {"n_candidates", c.bo.n_candidates},
            {"n_restarts", c.bo.n_restarts}}},
          {"batch_size", c.batch_size},
          {"seeds", c.seeds},
          {"data_seed", c.data_seed},
          {"ta_scale", c.ta_scale},
          {"ties_scale", c.ties_scale},
          {"ties_density", c.ties_density},
          {"out_dir", c.out_dir.string()}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    auto range = [](const nlohmann::json& r) { return ScoreRange(r.at(0).get<int>(), r.at(1).get<int>()); };
    c.n_sources = j.value("n_sources", c.n_sources);
    c.dim = j.value("dim", c.dim);
    c.samples_per_source = j.value("samples_per_source", c.samples_per_source);
    c.target_samples = j.value("target_samples", c.target_samples);
    if (j.contains("source_ranges")) {
      c.source_ranges.clear();
      for (const auto& r : j.at("source_ranges")) c.source_ranges.push_back(range(r));
    }
    if (j.contains("target_range")) c.target_range = range(j.at("target_range"));
    c.target_id = j.value("target_id", c.target_id);
    c.n_adversarial = j.value("n_adversarial", c.n_adversarial);
    c.mean_shift = j.value("mean_shift", c.mean_shift);
    c.concept_perturbation = j.value("concept_perturbation", c.concept_perturbation);
    c.latent_gain = j.value("latent_gain", c.latent_gain);
    c.label_noise = j.value("label_noise", c.label_noise);
    c.latent_offset = j.value("latent_offset", c.latent_offset);
    c.target_blend = j.value("target_blend", c.target_blend);
    c.target_novel_shift = j.value("target_novel_shift", c.target_novel_shift);
    c.max_classes = j.value("max_classes", c.max_classes);
    c.base_scale = j.value("base_scale", c.base_scale);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.rank = t.value("rank", c.train.rank);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.steps = t.value("steps", c.train.steps);
      c.train.plateau = t.value("plateau", c.train.plateau);
    }
    if (j.contains("bo")) {
      const auto& b = j.at("bo");
      c.bo.n_init = b.value("n_init", c.bo.n_init);
      c.bo.n_iter = b.value("n_iter", c.bo.n_iter);
      c.bo.xi = b.value("xi", c.bo.xi);
      c.bo.n_candidates = b.value("n_candidates", c.bo.n_candidates);
      c.bo.n_restarts = b.value("n_restarts", c.bo.n_restarts);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seeds = j.value("seeds", c.seeds);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.ta_scale = j.value("ta_scale", c.ta_scale);
    c.ties_scale = j.value("ties_scale", c.ties_scale);
    c.ties_density = j.value("ties_density", c.ties_density);
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad experiment config: ") + e.what());
  }
  return c;
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------- data

Domains gen_domains(const ExperimentConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.data_seed);
  const Vector shared = random_unit(rng, cfg.dim);
  std::vector<Vector> concepts;
  std::vector<Vector> means;
  std::vector<double> offsets;
  for (int j = 0; j < cfg.n_sources; ++j) {
    Vector w = shared + cfg.concept_perturbation * random_unit(rng, cfg.dim);
    w.normalize();
    // An adversarial source reverses the whole latent, so its scale runs the
    // other way round.
    const bool adversarial = j >= cfg.n_sources - cfg.n_adversarial;
    if (adversarial) w = -w;
    offsets.push_back(adversarial ? -cfg.latent_offset : cfg.latent_offset);
    concepts.push_back(std::move(w));
    means.push_back(cfg.mean_shift * random_unit(rng, cfg.dim));
  }
  Vector target_concept = Vector::Zero(cfg.dim);
  for (int j : cfg.target_blend) {
    if (j >= cfg.n_sources - cfg.n_adversarial) throw InvalidArgument("target_blend names an adversarial source");
    target_concept += concepts[static_cast<std::size_t>(j)];
  }
  target_concept += cfg.target_novel_shift * random_unit(rng, cfg.dim);
  if (target_concept.norm() == 0.0) throw InvalidArgument("target concept collapsed to zero");
  target_concept.normalize();
  const Vector target_mean = cfg.mean_shift * random_unit(rng, cfg.dim);

  Domains d;
  for (int j = 0; j < cfg.n_sources; ++j) {
    const auto& range = cfg.source_ranges[static_cast<std::size_t>(j) % cfg.source_ranges.size()];
    d.sources.push_back(sample_domain(rng, cfg, concepts[static_cast<std::size_t>(j)],
                                      offsets[static_cast<std::size_t>(j)], means[static_cast<std::size_t>(j)],
                                      range, cfg.samples_per_source, "S" + std::to_string(j)));
  }
  d.target = sample_domain(rng, cfg, target_concept, cfg.latent_offset, target_mean, cfg.target_range, cfg.target_samples, cfg.target_id);
  return d;
}

// ---------------------------------------------------------------- manifest

nlohmann::json to_json(const RunManifest& m) {
  return {{"config_hash", m.config_hash},
          {"base_params", m.base_params},
          {"task_vectors", m.task_vectors},
          {"statistics", m.statistics},
          {"target_features", m.target_features},
          {"target_labels", m.target_labels},
          {"adapt_results", m.adapt_results},
          {"metrics", m.metrics},
          {"timestamps", m.timestamps}};
}

RunManifest run_manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.config_hash = j.value("config_hash", std::string{});
    m.base_params = j.value("base_params", std::string{});
    m.task_vectors = j.value("task_vectors", std::vector<std::string>{});
    m.statistics = j.value("statistics", std::vector<std::string>{});
    m.target_features = j.value("target_features", std::string{});
    m.target_labels = j.value("target_labels", std::string{});
    m.adapt_results = j.value("adapt_results", std::vector<std::string>{});
    m.metrics = j.value("metrics", std::string{});
    m.timestamps = j.value("timestamps", std::map<std::string, std::string>{});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
}

RunManifest load_manifest(const ExperimentConfig& cfg, FileSystem& fs) {
  const auto p = cfg.out_dir / kManifest;
  if (!fs.exists(p)) {
    RunManifest m;
    m.config_hash = config_hash(cfg);
    return m;
  }
  return run_manifest_from_json(read_json(fs, p));
}

void save_manifest(const ExperimentConfig& cfg, const RunManifest& m, FileSystem& fs) {
  fs.write(cfg.out_dir / kManifest, to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------- methods

std::string method_name(Method m) {
  switch (m) {
    case Method::kPim: return "pim";
    case Method::kPimUniformPrior: return "pim_uniform_prior";
    case Method::kPimNoEntropy: return "pim_no_entropy";
    case Method::kPimNoKl: return "pim_no_kl";
    case Method::kRandomSearch: return "random_search";
    case Method::kAveraging: return "averaging";
    case Method::kTaskArithmetic: return "task_arithmetic";
    case Method::kTies: return "ties";
  }
  return "unknown";
}

std::vector<Method> all_methods() {
  return {Method::kPim,        Method::kPimUniformPrior, Method::kPimNoEntropy,   Method::kPimNoKl,
          Method::kRandomSearch, Method::kAveraging,     Method::kTaskArithmetic, Method::kTies};
}

Method parse_method(const std::string& name) {
  for (Method m : all_methods())
    if (method_name(m) == name) return m;
  throw InvalidArgument("unknown method '" + name + "'");
}

nlohmann::json to_json(const AdaptResult& r) {
  nlohmann::json j{{"method", method_name(r.method)}, {"seed", r.seed}, {"coefficients", r.coefficients}};
  if (r.method == Method::kTies) j["ties"] = {{"density", r.ties_density}, {"scale", r.ties_scale}};
  j["trace"] = r.trace ? to_json(*r.trace) : nlohmann::json(nullptr);
  return j;
}

AdaptResult adapt_result_from_json(const nlohmann::json& j) {
  try {
    AdaptResult r;
    r.method = parse_method(j.at("method").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.coefficients = j.at("coefficients").get<std::vector<double>>();
    if (j.contains("ties")) {
      r.ties_density = j["ties"].at("density").get<double>();
      r.ties_scale = j["ties"].at("scale").get<double>();
    }
    if (j.contains("trace") && !j.at("trace").is_null()) r.trace = bo_trace_from_json(j.at("trace"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad adapt result: ") + e.what());
  }
}

// ---------------------------------------------------------------- adaptation

AdaptationContext load_adaptation_context(const RunManifest& m, const ExperimentConfig& cfg, FileSystem& fs) {
  if (m.base_params.empty() || m.task_vectors.empty() || m.statistics.empty() || m.target_features.empty())
    throw InvalidArgument("manifest is incomplete: run gen-data and train-sources first");
  AdaptationContext ctx;
  ctx.base = param_set_from_json(read_json(fs, cfg.out_dir / m.base_params));
  for (const auto& p : m.task_vectors) ctx.task_vectors.push_back(task_vector_from_json(read_json(fs, cfg.out_dir / p)));
  for (const auto& p : m.statistics) ctx.statistics.push_back(source_statistics_from_json(read_json(fs, cfg.out_dir / p)));
  ctx.target = parse_unlabeled_jsonl(fs.read(cfg.out_dir / m.target_features));
  return ctx;
}

std::vector<std::size_t> draw_batch(std::size_t available, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> idx(available);
  for (std::size_t i = 0; i < available; ++i) idx[i] = i;
  if (size >= available) return idx;
  std::mt19937_64 rng(seed ^ 0xB5AD4ECEDA1CE2A9ULL);
  // Partial Fisher-Yates: the first `size` slots are the sample.
  for (std::size_t i = 0; i < size; ++i) {
    const auto j = i + static_cast<std::size_t>(unit_draw(rng) * static_cast<double>(available - i));
    std::swap(idx[i], idx[std::min(j, available - 1)]);
  }
  idx.resize(size);
  return idx;
}

BlackBox make_objective(const AdaptationContext& ctx, std::span<const std::size_t> batch, ObjectiveConfig objective) {
  std::vector<FeatureVector> xs;
  xs.reserve(batch.size());
  for (std::size_t i : batch) xs.push_back(ctx.target.features.at(i));
  const int classes = ctx.target.range.classes();
  return [&ctx, xs = std::move(xs), objective = std::move(objective), classes](const Vector& lambda) {
    std::vector<double> coeffs(lambda.data(), lambda.data() + lambda.size());
    const ProbScorer scorer(merge(ctx.base, ctx.task_vectors, MergeSpec(std::move(coeffs))), classes);
    return evaluate(batch_predict(scorer, xs), objective);
  };
}

ParamSet merged_params(const AdaptationContext& ctx, const AdaptResult& r) {
  if (r.method == Method::kTies) return merge_ties(ctx.base, ctx.task_vectors, r.ties_density, r.ties_scale);
  double lo = 0.0;
  double hi = 1.0;
  for (double c : r.coefficients) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  return merge(ctx.base, ctx.task_vectors, MergeSpec(r.coefficients, lo, hi));
}

double target_qwk(const ParamSet& params, const LabeledSet& target) {
  const ProbScorer scorer(params, target.range.classes());
  QwkAccumulator acc(target.range);
  for (std::size_t i = 0; i < target.size(); ++i)
    acc.add(target.scores[i], score_from_distribution(scorer.predict(target.features[i]), target.range));
  return acc.value();
}

// ---------------------------------------------------------------- phases

RunManifest run_gen_data(const ExperimentConfig& cfg, FileSystem& fs) {
  const Domains d = gen_domains(cfg);
  nlohmann::json index{{"sources", nlohmann::json::array()}};
  for (int j = 0; j < cfg.n_sources; ++j) {
    fs.write(cfg.out_dir / source_data_path(j), labeled_to_jsonl(d.sources[static_cast<std::size_t>(j)]));
    index["sources"].push_back(source_data_path(j));
  }
  fs.write(cfg.out_dir / kSourcesIndex, index.dump(2) + "\n");
  fs.write(cfg.out_dir / kTargetFeatures,
           unlabeled_to_jsonl(UnlabeledSet{d.target.features, d.target.range, d.target.domain}));
  fs.write(cfg.out_dir / kTargetLabels,
           nlohmann::json{{"range", {d.target.range.lo(), d.target.range.hi()}}, {"y", d.target.scores}}.dump() + "\n");

  RunManifest m;
  m.config_hash = config_hash(cfg);
  m.target_features = kTargetFeatures;
  m.target_labels = kTargetLabels;
  m.timestamps["gen-data"] = now_utc();
  save_manifest(cfg, m, fs);
  return m;
}

RunManifest run_fit_priors(const ExperimentConfig& cfg, FileSystem& fs) {
  RunManifest m = load_manifest(cfg, fs);
  const auto sources = load_sources(cfg, fs);
  m.statistics.clear();
  for (int j = 0; j < cfg.n_sources; ++j) {
    fs.write(cfg.out_dir / statistics_path(j), to_json(statistics_for(sources[static_cast<std::size_t>(j)])).dump(2) + "\n");
    m.statistics.push_back(statistics_path(j));
  }
  m.timestamps["fit-priors"] = now_utc();
  save_manifest(cfg, m, fs);
  return m;
}

RunManifest run_pretrain(const ExperimentConfig& cfg, FileSystem& fs) {
  cfg.validate();
  RunManifest m = load_manifest(cfg, fs);
  const auto sources = load_sources(cfg, fs);
  const ParamSet base = make_base_params(cfg.logit_space(), cfg.dim, cfg.data_seed ^ 0x5EEDBA5EULL, cfg.base_scale);
  fs.write(cfg.out_dir / kBaseParams, to_json(base).dump() + "\n");
  m.base_params = kBaseParams;
  m.task_vectors.clear();
  m.statistics.clear();
  for (int j = 0; j < cfg.n_sources; ++j) {
    const auto& src = sources[static_cast<std::size_t>(j)];
    TrainConfig tc = cfg.train;
    tc.seed = cfg.data_seed + 1000 + static_cast<std::uint64_t>(j);
    const TaskVector tv = train_source(base, src, tc);
    fs.write(cfg.out_dir / task_vector_path(j), to_json(tv).dump() + "\n");
    m.task_vectors.push_back(task_vector_path(j));
    fs.write(cfg.out_dir / statistics_path(j), to_json(statistics_for(src)).dump(2) + "\n");
    m.statistics.push_back(statistics_path(j));
  }
  m.timestamps["train-sources"] = now_utc();
  save_manifest(cfg, m, fs);
  return m;
}

AdaptResult run_adapt(const ExperimentConfig& cfg, Method method, std::uint64_t seed, FileSystem& fs) {
  RunManifest m = load_manifest(cfg, fs);
  const AdaptationContext ctx = load_adaptation_context(m, cfg, fs);
  const std::size_t n_sources = ctx.task_vectors.size();

  AdaptResult r;
  r.method = method;
  r.seed = seed;
  switch (method) {
    case Method::kAveraging:
      r.coefficients.assign(n_sources, 1.0 / static_cast<double>(n_sources));
      break;
    case Method::kTaskArithmetic:
      r.coefficients.assign(n_sources, cfg.ta_scale);
      break;
    case Method::kTies:
      r.ties_density = cfg.ties_density;
      r.ties_scale = cfg.ties_scale;
      break;
    default: {
      const DiscretePrior prior = build_prior(ctx.statistics, ctx.target.range);
      const auto batch = draw_batch(ctx.target.features.size(), static_cast<std::size_t>(cfg.batch_size), seed);
      const BlackBox f = make_objective(ctx, batch, objective_for(method, prior));
      BoConfig bo = cfg.bo;
      bo.bounds.assign(n_sources, {0.0, 1.0});
      bo.seed = seed;
      BoTrace trace = method == Method::kRandomSearch ? random_search(f, bo) : optimize(f, bo);
      r.coefficients.assign(trace.lambda_star.data(), trace.lambda_star.data() + trace.lambda_star.size());
      r.trace = std::move(trace);
    }
  }

  const std::string path = adapt_path(method, seed);
  fs.write(cfg.out_dir / path, to_json(r).dump() + "\n");
  if (std::find(m.adapt_results.begin(), m.adapt_results.end(), path) == m.adapt_results.end())
    m.adapt_results.push_back(path);
  m.timestamps["adapt"] = now_utc();
  save_manifest(cfg, m, fs);
  return r;
}

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string out = "target_id,method,seed,qwk\n";
  for (const auto& r : rows)
    out += r.target_id + "," + r.method + "," + std::to_string(r.seed) + "," + format_double(r.qwk) + "\n";
  return out;
}

std::vector<MetricRow> metrics_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "target_id,method,seed,qwk") throw FormatError("metrics CSV has an unexpected header: " + line);
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) throw FormatError("metrics CSV line " + std::to_string(lineno) + " needs 4 fields");
    MetricRow r{f[0], f[1], 0, 0.0};
    const auto s = std::from_chars(f[2].data(), f[2].data() + f[2].size(), r.seed);
    const auto q = std::from_chars(f[3].data(), f[3].data() + f[3].size(), r.qwk);
    if (s.ec != std::errc{} || s.ptr != f[2].data() + f[2].size() || q.ec != std::errc{} ||
        q.ptr != f[3].data() + f[3].size() || f[0].empty() || f[1].empty())
      throw FormatError("metrics CSV line " + std::to_string(lineno) + " is malformed");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw FormatError("metrics CSV has no rows");
  return rows;
}

std::vector<MetricRow> run_evaluate(const ExperimentConfig& cfg, FileSystem& fs) {
  RunManifest m = load_manifest(cfg, fs);
  if (m.adapt_results.empty()) throw InvalidArgument("no adapt results to evaluate");
  AdaptationContext ctx = load_adaptation_context(m, cfg, fs);
  const LabeledSet target = load_labeled_target(m, cfg, fs);

  std::vector<AdaptResult> results;
  for (const auto& p : m.adapt_results) results.push_back(adapt_result_from_json(read_json(fs, cfg.out_dir / p)));
  const auto order = all_methods();
  auto rank = [&](Method x) { return std::find(order.begin(), order.end(), x) - order.begin(); };
  std::stable_sort(results.begin(), results.end(), [&](const AdaptResult& a, const AdaptResult& b) {
    return rank(a.method) != rank(b.method) ? rank(a.method) < rank(b.method) : a.seed < b.seed;
  });

  std::vector<MetricRow> rows;
  for (const auto& r : results)
    rows.push_back({target.domain, method_name(r.method), r.seed, target_qwk(merged_params(ctx, r), target)});
  fs.write(cfg.out_dir / kMetrics, metrics_to_csv(rows));
  m.metrics = kMetrics;
  m.timestamps["evaluate"] = now_utc();
  save_manifest(cfg, m, fs);
  return rows;
}

Report run_report(const std::string& csv) {
  const auto rows = metrics_from_csv(csv);
  std::vector<std::string> targets;
  std::vector<std::string> methods;
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    if (std::find(targets.begin(), targets.end(), r.target_id) == targets.end()) targets.push_back(r.target_id);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    auto& a = acc[{r.method, r.target_id}];
    a.first += r.qwk;
    a.second += 1;
  }

  // columns: each target, then the average over targets present for the method
  const std::size_t ncol = targets.size() + 1;
  std::vector<std::vector<std::optional<double>>> table(methods.size(), std::vector<std::optional<double>>(ncol));
  for (std::size_t i = 0; i < methods.size(); ++i) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto it = acc.find({methods[i], targets[t]});
      if (it == acc.end()) continue;
      const double mean = it->second.first / it->second.second;
      table[i][t] = mean;
      sum += mean;
      ++n;
    }
    if (n > 0) table[i][targets.size()] = sum / n;
  }
  std::vector<std::optional<std::size_t>> best(ncol);
  for (std::size_t c = 0; c < ncol; ++c)
    for (std::size_t i = 0; i < methods.size(); ++i)
      if (table[i][c] && (!best[c] || *table[i][c] > *table[*best[c]][c])) best[c] = i;

  std::ostringstream os;
  os << std::left << std::setw(20) << "method";
  for (const auto& t : targets) os << std::right << std::setw(10) << t;
  os << std::right << std::setw(10) << "avg" << "\n";
  nlohmann::json j{{"targets", targets}, {"methods", nlohmann::json::array()}, {"best", nlohmann::json::object()}};
  for (std::size_t i = 0; i < methods.size(); ++i) {
    os << std::left << std::setw(20) << methods[i];
    nlohmann::json mj{{"method", methods[i]}, {"per_target", nlohmann::json::object()}};
    for (std::size_t c = 0; c < ncol; ++c) {
      std::ostringstream cell;
      if (table[i][c]) {
        cell << std::fixed << std::setprecision(3) << *table[i][c] << (best[c] == i ? "*" : " ");
        if (c < targets.size())
          mj["per_target"][targets[c]] = *table[i][c];
        else
          mj["average"] = *table[i][c];
      } else {
        cell << "-  ";
      }
      os << std::right << std::setw(10) << cell.str();
    }
    os << "\n";
    j["methods"].push_back(std::move(mj));
  }
  for (std::size_t c = 0; c < ncol; ++c)
    if (best[c]) j["best"][c < targets.size() ? targets[c] : std::string("avg")] = methods[*best[c]];
  return {os.str(), std::move(j)};
}

std::vector<MetricRow> run_all(const ExperimentConfig& cfg, const std::vector<Method>& methods, FileSystem& fs) {
  run_gen_data(cfg, fs);
  run_pretrain(cfg, fs);
  for (Method m : methods)
    for (std::uint64_t s : cfg.seeds) run_adapt(cfg, m, s, fs);
  auto rows = run_evaluate(cfg, fs);
  const Report rep = run_report(metrics_to_csv(rows));
  fs.write(cfg.out_dir / "report.txt", rep.text);
  fs.write(cfg.out_dir / "report.json", rep.json.dump(2) + "\n");
  return rows;
}

}  // namespace mergeadapt
