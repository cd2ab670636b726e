#pragma once

// End-to-end experiment pipeline on synthetic scoring domains.
//
// Phases communicate only through files under the output directory:
//
//   gen-data       data/source_<j>.jsonl, data/sources.json (index),
//                  data/target_features.jsonl, data/target_labels.json
//   train-sources  models/base.json, models/task_vector_<j>.json,
//                  stats/source_<j>.json
//   adapt          adapt/<method>_seed<s>.json
//   evaluate       metrics.csv
//   report         report.txt, report.json
//
// manifest.json never lists the source datasets. The adaptation phase reads
// the manifest, base parameters, task vectors, source statistics and target
// features; the target labels are read by evaluate alone.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "mergeadapt/bayes_opt.hpp"
#include "mergeadapt/param_algebra.hpp"
#include "mergeadapt/pim_objective.hpp"
#include "mergeadapt/score_prior.hpp"
#include "mergeadapt/scoring_model.hpp"

namespace mergeadapt {

/// All artifact I/O of the pipeline goes through this interface.
class FileSystem {
 public:
  virtual ~FileSystem() = default;
  virtual std::string read(const std::filesystem::path& path) = 0;
  virtual void write(const std::filesystem::path& path, const std::string& content) = 0;
  virtual bool exists(const std::filesystem::path& path) = 0;
};

class DiskFileSystem : public FileSystem {
 public:
  std::string read(const std::filesystem::path& path) override;
  /// Creates parent directories as needed.
  void write(const std::filesystem::path& path, const std::string& content) override;
  bool exists(const std::filesystem::path& path) override;
};

struct ExperimentConfig {
  int n_sources = 5;
  int dim = 16;
  int samples_per_source = 400;
  int target_samples = 400;
  std::vector<ScoreRange> source_ranges{{0, 3}, {1, 6}, {0, 4}, {0, 3}, {1, 6}};
  ScoreRange target_range{0, 4};
  std::string target_id = "T1";
  int n_adversarial = 1;        // the last n_adversarial sources
  double mean_shift = 0.5;      // norm of each domain's feature-mean offset
  double concept_perturbation = 0.35;
  double latent_gain = 1.6;
  double latent_offset = 1.0;   // skews every score distribution upward
  double label_noise = 0.1;     // probability of a +-1 label flip
  std::vector<int> target_blend{0, 1, 2};
  double target_novel_shift = 0.2;
  int max_classes = 0;          // 0: largest class count among all ranges
  double base_scale = 0.05;
  TrainConfig train;
  BoConfig bo;                  // bounds are set per run from n_sources
  int batch_size = 64;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::uint64_t data_seed = 2024;
  double ta_scale = 0.4;
  double ties_scale = 1.0;
  double ties_density = 1.0;
  std::filesystem::path out_dir = "mergeadapt_run";

  /// Throws InvalidArgument when the config is inconsistent.
  void validate() const;
  int logit_space() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

struct Domains {
  std::vector<LabeledSet> sources;
  LabeledSet target;
};

/// Gaussian features with per-domain mean offsets; scores discretize a
/// squashed linear latent into each domain's range, with label noise.
Domains gen_domains(const ExperimentConfig& cfg);

struct RunManifest {
  std::string config_hash;
  std::string base_params;
  std::vector<std::string> task_vectors;
  std::vector<std::string> statistics;
  std::string target_features;
  std::string target_labels;
  std::vector<std::string> adapt_results;
  std::string metrics;
  std::map<std::string, std::string> timestamps;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const nlohmann::json& j);

enum class Method {
  kPim,
  kPimUniformPrior,
  kPimNoEntropy,
  kPimNoKl,
  kRandomSearch,
  kAveraging,
  kTaskArithmetic,
  kTies,
};

std::string method_name(Method m);
/// Throws InvalidArgument on unknown names.
Method parse_method(const std::string& name);
std::vector<Method> all_methods();

struct AdaptResult {
  Method method = Method::kPim;
  std::uint64_t seed = 0;
  std::vector<double> coefficients;  // empty for TIES
  double ties_density = 1.0;
  double ties_scale = 1.0;
  std::optional<BoTrace> trace;
};

nlohmann::json to_json(const AdaptResult& r);
AdaptResult adapt_result_from_json(const nlohmann::json& j);

/// Everything the adaptation phase may see.
struct AdaptationContext {
  ParamSet base;
  std::vector<TaskVector> task_vectors;
  std::vector<SourceStatistics> statistics;
  UnlabeledSet target;
};

AdaptationContext load_adaptation_context(const RunManifest& manifest, const ExperimentConfig& cfg, FileSystem& fs);

/// Indices of the fixed evaluation batch: `size` draws without replacement,
/// or every sample when fewer are available.
std::vector<std::size_t> draw_batch(std::size_t available, std::size_t size, std::uint64_t seed);

/// f(lambda) over the fixed batch for one objective variant.
BlackBox make_objective(const AdaptationContext& ctx, std::span<const std::size_t> batch, ObjectiveConfig objective);

ParamSet merged_params(const AdaptationContext& ctx, const AdaptResult& r);

/// QWK of the merged scorer on a labeled target.
double target_qwk(const ParamSet& params, const LabeledSet& target);

/// Loads or writes manifest.json under the output directory.
RunManifest load_manifest(const ExperimentConfig& cfg, FileSystem& fs);
void save_manifest(const ExperimentConfig& cfg, const RunManifest& m, FileSystem& fs);

RunManifest run_gen_data(const ExperimentConfig& cfg, FileSystem& fs);
/// Trains one task vector per source and writes its statistics.
RunManifest run_pretrain(const ExperimentConfig& cfg, FileSystem& fs);
/// Statistics only (train-sources also writes them).
RunManifest run_fit_priors(const ExperimentConfig& cfg, FileSystem& fs);
AdaptResult run_adapt(const ExperimentConfig& cfg, Method method, std::uint64_t seed, FileSystem& fs);

struct MetricRow {
  std::string target_id;
  std::string method;
  std::uint64_t seed = 0;
  double qwk = 0.0;
};

std::string metrics_to_csv(const std::vector<MetricRow>& rows);
/// Throws FormatError on malformed or empty input.
std::vector<MetricRow> metrics_from_csv(const std::string& text);

/// QWK for every adapt result recorded in the manifest; writes metrics.csv.
std::vector<MetricRow> run_evaluate(const ExperimentConfig& cfg, FileSystem& fs);

struct Report {
  std::string text;
  nlohmann::json json;
};

/// Mean QWK per method and target plus a per-method average; best marked per column.
Report run_report(const std::string& csv);

/// Every phase for the given methods and the config's seeds.
std::vector<MetricRow> run_all(const ExperimentConfig& cfg, const std::vector<Method>& methods, FileSystem& fs);

}  // namespace mergeadapt
