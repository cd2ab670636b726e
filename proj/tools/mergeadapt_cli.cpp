// mergeadapt: source-free adaptation by task-vector merging on synthetic
// scoring domains.
//
//   mergeadapt gen-data       [--config c.json] [--seed s] [--out dir]
//   mergeadapt train-sources  ...
//   mergeadapt fit-priors     ...
//   mergeadapt adapt --method pim|pim_uniform_prior|pim_no_entropy|pim_no_kl|
//                             random_search|averaging|task_arithmetic|ties
//   mergeadapt evaluate
//   mergeadapt report
//   mergeadapt run-all        (every phase, every method)

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mergeadapt/harness.hpp"

namespace ma = mergeadapt;

namespace {

ma::ExperimentConfig resolve_config(const std::string& config_path, std::optional<std::uint64_t> seed,
                                    const std::string& out, ma::FileSystem& fs) {
  ma::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = ma::experiment_config_from_json(nlohmann::json::parse(fs.read(config_path)));
  if (const char* env = std::getenv("MERGE_ADAPT_OUT"); env && *env) cfg.out_dir = env;
  if (!out.empty()) cfg.out_dir = out;
  if (seed) cfg.seeds = {*seed};
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free adaptation by merging low-rank task vectors"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "experiment config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "run a single adaptation seed");
  app.add_option("--out", out, "output directory (overrides config and MERGE_ADAPT_OUT)");

  auto* gen = app.add_subcommand("gen-data", "generate synthetic source and target domains");
  auto* train = app.add_subcommand("train-sources", "train one adapter per source and write its statistics");
  auto* priors = app.add_subcommand("fit-priors", "write per-source Beta statistics only");
  auto* adapt = app.add_subcommand("adapt", "choose merging coefficients for the target");
  std::string method = "pim";
  adapt->add_option("--method", method, "merging method")->required();
  auto* evaluate = app.add_subcommand("evaluate", "score every adapt result on the labeled target");
  auto* report = app.add_subcommand("report", "aggregate metrics.csv into a summary table");
  auto* run_all = app.add_subcommand("run-all", "run every phase with every method");

  CLI11_PARSE(app, argc, argv);

  try {
    ma::DiskFileSystem fs;
    const auto cfg = resolve_config(config_path, seed, out, fs);
    if (gen->parsed()) {
      ma::run_gen_data(cfg, fs);
      std::cout << "wrote synthetic domains to " << cfg.out_dir.string() << "\n";
    } else if (train->parsed()) {
      const auto m = ma::run_pretrain(cfg, fs);
      std::cout << "trained " << m.task_vectors.size() << " source adapters\n";
    } else if (priors->parsed()) {
      const auto m = ma::run_fit_priors(cfg, fs);
      std::cout << "wrote " << m.statistics.size() << " source statistics files\n";
    } else if (adapt->parsed()) {
      const auto mth = ma::parse_method(method);
      for (auto s : cfg.seeds) {
        const auto r = ma::run_adapt(cfg, mth, s, fs);
        std::cout << method << " seed " << s << ":";
        for (double c : r.coefficients) std::cout << " " << c;
        if (r.trace) std::cout << "  f*=" << r.trace->best_value();
        std::cout << "\n";
      }
    } else if (evaluate->parsed()) {
      const auto rows = ma::run_evaluate(cfg, fs);
      std::cout << ma::metrics_to_csv(rows);
    } else if (report->parsed()) {
      const auto rep = ma::run_report(fs.read(cfg.out_dir / "metrics.csv"));
      fs.write(cfg.out_dir / "report.txt", rep.text);
      fs.write(cfg.out_dir / "report.json", rep.json.dump(2) + "\n");
      std::cout << rep.text;
    } else if (run_all->parsed()) {
      const auto rows = ma::run_all(cfg, ma::all_methods(), fs);
      std::cout << ma::run_report(ma::metrics_to_csv(rows)).text;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
