#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nfbench/metrics.hpp"
#include "nfbench/samplers.hpp"

namespace nfbench::harness {

/// One experiment: a target, a sampler, an optional flow and budgets. Fully
/// deterministic given the seed when budgets are step-counted.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  targets::TargetSpec target;
  std::string dataset_path;
  std::string reference_moments_path;
  samplers::SamplerConfig sampler;
  bool has_flow = false;
  std::string flow_architecture;
  flows::FlowHyper flow_hyper;
  std::string hyper_id = "default";
  std::string output_path;
  std::string loss_history_path;
};

ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);
/// Canonical serialized form (defaults filled, keys sorted).
std::string config_to_json(const ExperimentConfig& config);

struct ExperimentReport {
  std::string config_echo;  // canonical config JSON
  std::string target_name;
  std::string target_family;
  std::optional<Real> b2;
  samplers::RunResult result;
  long param_count = 0;
  Real total_seconds = 0.0;
  std::string error;  // non-empty when the run failed

  bool ok() const { return error.empty(); }
};

ExperimentReport run_experiment(const ExperimentConfig& config);
std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);

targets::PosteriorDataset load_dataset(const std::string& path);
targets::ReferenceMoments load_reference_moments(const std::string& path);

struct BatchOutcome {
  int succeeded = 0;
  int failed = 0;
};

/// Runs every config (sorted by path) with up to `workers` threads; each
/// experiment is isolated, failures are recorded in its report. Appends one
/// JSON report per line to `ndjson_path` and a row per experiment to
/// `csv_path` (empty paths skip the file).
BatchOutcome run_batch(const std::vector<std::string>& config_paths, int workers,
                       const std::string& ndjson_path, const std::string& csv_path);

std::string summary_csv_header();
std::string summary_csv_row(const ExperimentReport& report);

enum class RankScope { kGlobal, kPerFamily };
enum class MethodField { kFull, kSampler, kFlow };

/// Groups reports by target, ranks methods by b^2 within each group and
/// aggregates standardized ranks. Reports without b^2 and degenerate groups
/// are listed in the coverage footer.
std::string rank_report_csv(const std::vector<ExperimentReport>& reports,
                            RankScope scope = RankScope::kGlobal,
                            MethodField method = MethodField::kFull);

/// CLI entry point: run | batch | rank | validate. Returns the exit code
/// (0 ok, 1 config error, 2 runtime failure, 3 partial batch).
int cli_main(int argc, char** argv);

}  // namespace nfbench::harness
