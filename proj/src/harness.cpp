#include "nfbench/harness.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "nfbench/errors.hpp"
#include "nfbench/training.hpp"

namespace nfbench::harness {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& path) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown key \"" + it.key() + "\"", path);
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("wrong type", path + "." + key);
  }
}

targets::TargetSpec parse_target(const json& j, std::string* dataset_path,
                                 std::string* reference_path) {
  reject_unknown_keys(j,
                      {"family", "dim", "scale", "seed", "dataset",
                       "reference_moments", "means", "stds", "weights"},
                      "target");
  targets::TargetSpec spec;
  if (!j.contains("family")) throw ConfigError("missing key", "target.family");
  spec.family = j.at("family").get<std::string>();
  spec.dim = get_or<int>(j, "dim", 100, "target");
  spec.scale = get_or<Real>(j, "scale", 10.0, "target");
  spec.seed = get_or<std::uint64_t>(j, "seed", 0, "target");
  *dataset_path = get_or<std::string>(j, "dataset", "", "target");
  *reference_path = get_or<std::string>(j, "reference_moments", "", "target");
  if (j.contains("means")) {
    targets::MixtureSpec mix;
    auto rows = j.at("means").get<std::vector<std::vector<Real>>>();
    if (rows.empty()) throw ConfigError("empty matrix", "target.means");
    mix.component_means.resize(static_cast<Eigen::Index>(rows.size()),
                               static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows[0].size())
        throw ConfigError("ragged matrix", "target.means");
      for (std::size_t c = 0; c < rows[r].size(); ++c)
        mix.component_means(static_cast<Eigen::Index>(r),
                            static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    auto stds = get_or<std::vector<Real>>(j, "stds", {}, "target");
    auto weights = get_or<std::vector<Real>>(j, "weights", {}, "target");
    mix.component_stds = Eigen::Map<const Vec>(stds.data(),
                                               static_cast<Eigen::Index>(stds.size()));
    mix.weights = Eigen::Map<const Vec>(weights.data(),
                                        static_cast<Eigen::Index>(weights.size()));
    spec.mixture = std::move(mix);
    spec.dim = static_cast<int>(spec.mixture->component_means.cols());
  }
  return spec;
}

samplers::Budget parse_budget(const json& j, const std::string& seconds_key,
                              const std::string& steps_key) {
  samplers::Budget b;
  b.seconds = get_or<Real>(j, seconds_key, 0.0, "budget");
  b.steps = get_or<long>(j, steps_key, -1, "budget");
  return b;
}

flows::FlowHyper parse_hyper(const json& j) {
  flows::FlowHyper h;
  if (j.is_string()) {
    if (j.get<std::string>() != "default")
      throw ConfigError("hyperparameters must be \"default\" or an object",
                        "flow.hyperparameters");
    return h;
  }
  reject_unknown_keys(j,
                      {"layers", "hidden", "depth", "cnf_width", "cnf_depth",
                       "euler_steps", "rk_steps", "probes", "power_series_terms",
                       "roulette_p", "spectral_coefficient",
                       "jacobian_regularization", "spline_bound"},
                      "flow.hyperparameters");
  const std::string p = "flow.hyperparameters";
  h.layers = get_or<int>(j, "layers", h.layers, p);
  h.hidden = get_or<int>(j, "hidden", h.hidden, p);
  h.depth = get_or<int>(j, "depth", h.depth, p);
  h.cnf_width = get_or<int>(j, "cnf_width", h.cnf_width, p);
  h.cnf_depth = get_or<int>(j, "cnf_depth", h.cnf_depth, p);
  h.euler_steps = get_or<int>(j, "euler_steps", h.euler_steps, p);
  h.rk_steps = get_or<int>(j, "rk_steps", h.rk_steps, p);
  h.probes = get_or<int>(j, "probes", h.probes, p);
  h.power_series_terms = get_or<int>(j, "power_series_terms", h.power_series_terms, p);
  h.roulette_p = get_or<Real>(j, "roulette_p", h.roulette_p, p);
  h.spectral_coefficient =
      get_or<Real>(j, "spectral_coefficient", h.spectral_coefficient, p);
  h.jacobian_regularization =
      get_or<Real>(j, "jacobian_regularization", h.jacobian_regularization, p);
  h.spline_bound = get_or<Real>(j, "spline_bound", h.spline_bound, p);
  return h;
}

std::string hyper_identifier(const json& flow_json) {
  if (!flow_json.contains("hyperparameters") ||
      flow_json.at("hyperparameters").is_string())
    return "default";
  const json& h = flow_json.at("hyperparameters");
  std::ostringstream out;
  out << "L" << h.value("layers", 2) << "-h" << h.value("hidden", 10) << "-d"
      << h.value("depth", 2);
  if (h.contains("cnf_width") || h.contains("cnf_depth"))
    out << "-cw" << h.value("cnf_width", 10) << "-cd" << h.value("cnf_depth", 1);
  return out.str();
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  reject_unknown_keys(
      j, {"seed", "target", "sampler", "flow", "budget", "output", "loss_history"},
      "");
  ExperimentConfig config;
  config.seed = get_or<std::uint64_t>(j, "seed", 0, "");
  if (!j.contains("target")) throw ConfigError("missing key", "target");
  config.target =
      parse_target(j.at("target"), &config.dataset_path,
                   &config.reference_moments_path);

  if (!j.contains("sampler")) throw ConfigError("missing key", "sampler");
  const json& s = j.at("sampler");
  reject_unknown_keys(s,
                      {"kind", "chains", "leapfrog_steps", "jump_interval",
                       "mh_target_accept", "hmc_target_accept", "svi_step_size",
                       "mle_step_size", "mle_batch", "training_probes",
                       "reporting_probes", "reservoir_capacity"},
                      "sampler");
  if (!s.contains("kind")) throw ConfigError("missing key", "sampler.kind");
  auto& sc = config.sampler;
  sc.kind = s.at("kind").get<std::string>();
  sc.chains = get_or<int>(s, "chains", 100, "sampler");
  sc.leapfrog_steps = get_or<int>(s, "leapfrog_steps", 10, "sampler");
  sc.jump_interval = get_or<long>(s, "jump_interval", 25, "sampler");
  sc.mh_target_accept = get_or<Real>(s, "mh_target_accept", 0.234, "sampler");
  sc.hmc_target_accept = get_or<Real>(s, "hmc_target_accept", 0.65, "sampler");
  sc.svi_step_size = get_or<Real>(s, "svi_step_size", 0.05, "sampler");
  sc.mle_step_size = get_or<Real>(s, "mle_step_size", 0.05, "sampler");
  sc.mle_batch = get_or<long>(s, "mle_batch", 1024, "sampler");
  sc.training_probes = get_or<int>(s, "training_probes", 1, "sampler");
  sc.reporting_probes = get_or<int>(s, "reporting_probes", 20, "sampler");
  sc.reservoir_capacity = get_or<long>(s, "reservoir_capacity", 65536, "sampler");

  bool known_kind = sc.kind == "mh" || sc.kind == "hmc" || sc.kind == "imh" ||
                    sc.kind == "jump_mh" || sc.kind == "jump_hmc" ||
                    sc.kind == "neutra_mh" || sc.kind == "neutra_hmc";
  if (!known_kind) throw ConfigError("unknown sampler kind", "sampler.kind");
  if (sc.chains < 1) throw ConfigError("chains must be >= 1", "sampler.chains");
  if (sc.jump_interval < 1)
    throw ConfigError("jump_interval must be >= 1", "sampler.jump_interval");
  if (sc.kind == "imh" && s.contains("jump_interval") && sc.jump_interval != 1)
    throw ConfigError("imh fixes jump_interval = 1", "sampler.jump_interval");

  if (j.contains("flow") && !j.at("flow").is_null()) {
    const json& f = j.at("flow");
    reject_unknown_keys(f, {"architecture", "hyperparameters"}, "flow");
    if (!f.contains("architecture"))
      throw ConfigError("missing key", "flow.architecture");
    config.has_flow = true;
    config.flow_architecture = f.at("architecture").get<std::string>();
    if (f.contains("hyperparameters"))
      config.flow_hyper = parse_hyper(f.at("hyperparameters"));
    config.hyper_id = hyper_identifier(f);
  }
  if (sc.needs_flow() && !config.has_flow)
    throw ConfigError("sampler kind \"" + sc.kind + "\" requires a flow", "flow");
  if (!sc.needs_flow() && config.has_flow)
    throw ConfigError("sampler kind \"" + sc.kind + "\" does not take a flow",
                      "flow");

  if (!j.contains("budget")) throw ConfigError("missing key", "budget");
  const json& b = j.at("budget");
  reject_unknown_keys(b,
                      {"warmup_seconds", "sampling_seconds", "warmup_steps",
                       "sampling_steps", "svi_seconds", "svi_steps", "mle_seconds",
                       "mle_steps"},
                      "budget");
  sc.warmup = parse_budget(b, "warmup_seconds", "warmup_steps");
  sc.sampling = parse_budget(b, "sampling_seconds", "sampling_steps");
  sc.svi = parse_budget(b, "svi_seconds", "svi_steps");
  sc.mle = parse_budget(b, "mle_seconds", "mle_steps");
  if (!sc.sampling.step_mode() && sc.sampling.seconds <= 0)
    throw ConfigError("sampling budget must be positive", "budget");

  config.output_path = get_or<std::string>(j, "output", "", "");
  config.loss_history_path = get_or<std::string>(j, "loss_history", "", "");
  return config;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  json t;
  t["family"] = c.target.family;
  t["dim"] = c.target.dim;
  t["scale"] = c.target.scale;
  t["seed"] = c.target.seed;
  if (!c.dataset_path.empty()) t["dataset"] = c.dataset_path;
  if (!c.reference_moments_path.empty())
    t["reference_moments"] = c.reference_moments_path;
  if (c.target.mixture) {
    const auto& m = *c.target.mixture;
    std::vector<std::vector<Real>> rows;
    for (Eigen::Index r = 0; r < m.component_means.rows(); ++r)
      rows.emplace_back(m.component_means.row(r).begin(),
                        m.component_means.row(r).end());
    t["means"] = rows;
    t["stds"] = std::vector<Real>(m.component_stds.begin(), m.component_stds.end());
    t["weights"] = std::vector<Real>(m.weights.begin(), m.weights.end());
  }
  j["target"] = t;
  const auto& sc = c.sampler;
  j["sampler"] = {{"kind", sc.kind},
                  {"chains", sc.chains},
                  {"leapfrog_steps", sc.leapfrog_steps},
                  {"jump_interval", sc.jump_interval},
                  {"mh_target_accept", sc.mh_target_accept},
                  {"hmc_target_accept", sc.hmc_target_accept},
                  {"svi_step_size", sc.svi_step_size},
                  {"mle_step_size", sc.mle_step_size},
                  {"mle_batch", sc.mle_batch},
                  {"training_probes", sc.training_probes},
                  {"reporting_probes", sc.reporting_probes},
                  {"reservoir_capacity", sc.reservoir_capacity}};
  if (c.has_flow) {
    j["flow"] = {{"architecture", c.flow_architecture},
                 {"hyperparameters",
                  {{"layers", c.flow_hyper.layers},
                   {"hidden", c.flow_hyper.hidden},
                   {"depth", c.flow_hyper.depth},
                   {"cnf_width", c.flow_hyper.cnf_width},
                   {"cnf_depth", c.flow_hyper.cnf_depth},
                   {"euler_steps", c.flow_hyper.euler_steps},
                   {"rk_steps", c.flow_hyper.rk_steps},
                   {"probes", c.flow_hyper.probes},
                   {"power_series_terms", c.flow_hyper.power_series_terms},
                   {"roulette_p", c.flow_hyper.roulette_p},
                   {"spectral_coefficient", c.flow_hyper.spectral_coefficient},
                   {"jacobian_regularization", c.flow_hyper.jacobian_regularization},
                   {"spline_bound", c.flow_hyper.spline_bound}}}};
  } else {
    j["flow"] = nullptr;
  }
  json budget;
  if (sc.warmup.step_mode())
    budget["warmup_steps"] = sc.warmup.steps;
  else
    budget["warmup_seconds"] = sc.warmup.seconds;
  if (sc.sampling.step_mode())
    budget["sampling_steps"] = sc.sampling.steps;
  else
    budget["sampling_seconds"] = sc.sampling.seconds;
  if (sc.svi.step_mode())
    budget["svi_steps"] = sc.svi.steps;
  else if (sc.svi.seconds > 0)
    budget["svi_seconds"] = sc.svi.seconds;
  if (sc.mle.step_mode())
    budget["mle_steps"] = sc.mle.steps;
  else if (sc.mle.seconds > 0)
    budget["mle_seconds"] = sc.mle.seconds;
  j["budget"] = budget;
  if (!c.output_path.empty()) j["output"] = c.output_path;
  if (!c.loss_history_path.empty()) j["loss_history"] = c.loss_history_path;
  return j.dump();
}

// ---- dataset and reference files ----

targets::PosteriorDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed dataset JSON: ") + e.what());
  }
  targets::PosteriorDataset data;
  data.name = j.value("name", "");
  if (!j.contains("columns") || !j.at("columns").is_object())
    throw DataError("dataset needs a \"columns\" object");
  Eigen::Index scalar_len = -1;
  for (auto it = j.at("columns").begin(); it != j.at("columns").end(); ++it) {
    const json& col = it.value();
    if (!col.is_array() || col.empty())
      throw DataError("dataset column \"" + it.key() + "\" must be a non-empty array");
    if (col.front().is_array()) {
      auto rows = col.get<std::vector<std::vector<Real>>>();
      Mat m(static_cast<Eigen::Index>(rows.size()),
            static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size())
          throw DataError("dataset matrix \"" + it.key() + "\" has ragged rows");
        for (std::size_t cidx = 0; cidx < rows[r].size(); ++cidx)
          m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cidx)) =
              rows[r][cidx];
      }
      data.matrices[it.key()] = std::move(m);
    } else {
      auto values = col.get<std::vector<Real>>();
      if (scalar_len >= 0 && static_cast<Eigen::Index>(values.size()) != scalar_len)
        throw DataError("dataset columns have unequal lengths");
      scalar_len = static_cast<Eigen::Index>(values.size());
      data.columns[it.key()] =
          Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
    }
  }
  return data;
}

targets::ReferenceMoments load_reference_moments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reference moments file " + path);
  json j = json::parse(in);
  auto sm = j.at("second_moment").get<std::vector<Real>>();
  auto var = j.at("variance").get<std::vector<Real>>();
  if (sm.size() != var.size())
    throw DataError("reference moments: length mismatch");
  targets::ReferenceMoments m;
  m.second_moment = Eigen::Map<const Vec>(sm.data(), static_cast<Eigen::Index>(sm.size()));
  m.variance = Eigen::Map<const Vec>(var.data(), static_cast<Eigen::Index>(var.size()));
  if ((m.variance.array() <= 0).any())
    throw DataError("reference moments: variances must be positive");
  return m;
}

// ---- running one experiment ----

ExperimentReport run_experiment(const ExperimentConfig& config) {
  ExperimentReport report;
  report.config_echo = config_to_json(config);
  auto start = std::chrono::steady_clock::now();
  bool deterministic =
      config.sampler.warmup.step_mode() && config.sampler.sampling.step_mode();
  try {
    targets::TargetSpec spec = config.target;
    std::optional<targets::PosteriorDataset> dataset;
    if (!config.dataset_path.empty()) dataset = load_dataset(config.dataset_path);
    if (!config.reference_moments_path.empty())
      spec.reference = load_reference_moments(config.reference_moments_path);
    targets::TargetDistribution target = targets::build_target(spec, dataset);
    report.target_name = target.name;
    report.target_family = target.family;

    std::optional<flows::FlowModel> flow;
    if (config.has_flow) {
      flow = flows::build_flow(config.flow_architecture, target.dimension,
                               config.flow_hyper, mix_seed(config.seed, 0xf10dULL));
      report.param_count = flow->param_count();
    }
    samplers::RunResult result =
        samplers::run_sampler(config.sampler, target,
                              flow ? &*flow : nullptr, RandomStream(config.seed));
    if (!config.loss_history_path.empty()) {
      if (!result.svi_history.empty())
        training::write_loss_history_csv(config.loss_history_path,
                                         result.svi_history);
      if (!result.mle_history.empty())
        training::write_loss_history_csv(config.loss_history_path + ".mle.csv",
                                         result.mle_history);
    }
    report.result = std::move(result);
    try {
      auto ref = targets::reference_moments(target);
      report.b2 = metrics::squared_bias(report.result.second_moment,
                                        ref.second_moment, ref.variance);
    } catch (const MomentsUnavailable&) {
      report.b2.reset();
    }
  } catch (const std::exception& e) {
    report.error = e.what();
  }
  report.total_seconds =
      deterministic ? 0.0
                    : std::chrono::duration<Real>(std::chrono::steady_clock::now() -
                                                  start)
                          .count();
  if (!config.output_path.empty()) {
    std::ofstream out(config.output_path);
    if (out) out << report_to_json(report) << "\n";
  }
  return report;
}

std::string report_to_json(const ExperimentReport& r) {
  json j;
  j["config"] = json::parse(r.config_echo);
  j["target"] = r.target_name;
  j["family"] = r.target_family;
  if (r.b2)
    j["b2"] = *r.b2;
  else
    j["b2"] = nullptr;
  j["result"] = json::parse(samplers::run_result_to_json(r.result));
  j["param_count"] = r.param_count;
  j["wall"] = {{"total_seconds", r.total_seconds}};
  j["diagnostics"] = {{"dropped_points", r.result.dropped_points},
                      {"skipped_training_steps", r.result.skipped_training_steps},
                      {"budget_exhausted_in_warmup",
                       r.result.budget_exhausted_in_warmup},
                      {"error", r.error.empty() ? json(nullptr) : json(r.error)}};
  return j.dump();
}

ExperimentReport report_from_json(const std::string& text) {
  json j = json::parse(text);
  ExperimentReport r;
  r.config_echo = j.at("config").dump();
  r.target_name = j.value("target", "");
  r.target_family = j.value("family", "");
  if (!j.at("b2").is_null()) r.b2 = j.at("b2").get<Real>();
  r.result = samplers::run_result_from_json(j.at("result").dump());
  r.param_count = j.at("param_count").get<long>();
  r.total_seconds = j.at("wall").at("total_seconds").get<Real>();
  const json& d = j.at("diagnostics");
  r.result.dropped_points = d.at("dropped_points").get<long>();
  r.result.skipped_training_steps = d.at("skipped_training_steps").get<long>();
  r.result.budget_exhausted_in_warmup = d.at("budget_exhausted_in_warmup").get<bool>();
  if (!d.at("error").is_null()) r.error = d.at("error").get<std::string>();
  return r;
}

// ---- batch ----

std::string summary_csv_header() {
  return "target,sampler,flow,hyperparam_id,seed,b2,accept_local,accept_jump,"
         "warmup_s,sampling_s,param_count";
}

namespace {
std::string csv_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string summary_csv_row(const ExperimentReport& r) {
  json config = json::parse(r.config_echo);
  std::string sampler = config.at("sampler").at("kind").get<std::string>();
  std::string flow = config.at("flow").is_null()
                         ? ""
                         : config.at("flow").at("architecture").get<std::string>();
  std::string hyper_id = "default";
  if (!config.at("flow").is_null()) {
    ExperimentConfig cfg = parse_config_text(r.config_echo);
    hyper_id = cfg.hyper_id;
  }
  std::ostringstream out;
  out << r.target_name << "," << sampler << "," << flow << "," << hyper_id << ","
      << config.at("seed").get<std::uint64_t>() << ","
      << (r.b2 ? csv_real(*r.b2) : "") << "," << csv_real(r.result.accept_rate_local)
      << ","
      << (r.result.accept_rate_jump ? csv_real(*r.result.accept_rate_jump) : "")
      << "," << csv_real(r.result.warmup_seconds) << ","
      << csv_real(r.result.sampling_seconds) << "," << r.param_count;
  return out.str();
}

BatchOutcome run_batch(const std::vector<std::string>& config_paths, int workers,
                       const std::string& ndjson_path, const std::string& csv_path) {
  std::vector<std::string> paths = config_paths;
  std::sort(paths.begin(), paths.end());
  std::vector<ExperimentReport> reports(paths.size());
  std::mutex queue_mutex;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t mine;
      {
        std::lock_guard<std::mutex> lock(queue_mutex);
        if (next >= paths.size()) return;
        mine = next++;
      }
      ExperimentReport report;
      try {
        ExperimentConfig config = parse_config(paths[mine]);
        report = run_experiment(config);
      } catch (const std::exception& e) {
        report.error = e.what();
        report.config_echo = "{}";
        report.target_name = paths[mine];
      }
      reports[mine] = std::move(report);
    }
  };
  int n_workers = std::max(1, workers);
  std::vector<std::thread> threads;
  for (int i = 0; i < n_workers; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  BatchOutcome outcome;
  std::ofstream ndjson;
  if (!ndjson_path.empty()) ndjson.open(ndjson_path);
  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    csv << summary_csv_header() << "\n";
  }
  for (const auto& report : reports) {
    report.ok() ? ++outcome.succeeded : ++outcome.failed;
    if (ndjson.is_open()) ndjson << report_to_json(report) << "\n";
    if (csv.is_open() && report.ok()) csv << summary_csv_row(report) << "\n";
  }
  return outcome;
}

// ---- rank report ----

namespace {
std::string method_id(const ExperimentReport& r, MethodField field) {
  json config = json::parse(r.config_echo);
  std::string sampler = config.at("sampler").at("kind").get<std::string>();
  std::string flow = config.at("flow").is_null()
                         ? "-"
                         : config.at("flow").at("architecture").get<std::string>();
  std::string hyper = "-";
  if (!config.at("flow").is_null())
    hyper = parse_config_text(r.config_echo).hyper_id;
  switch (field) {
    case MethodField::kSampler: return sampler;
    case MethodField::kFlow: return flow;
    case MethodField::kFull: return sampler + "|" + flow + "|" + hyper;
  }
  return sampler;
}
}  // namespace

std::string rank_report_csv(const std::vector<ExperimentReport>& reports,
                            RankScope scope, MethodField method) {
  // target -> (family, method -> b2)
  std::map<std::string, std::pair<std::string, std::map<std::string, Real>>> groups;
  std::vector<std::string> footer;
  for (const auto& r : reports) {
    if (!r.ok()) {
      footer.push_back("# excluded (failed run): " + r.target_name);
      continue;
    }
    if (!r.b2) {
      footer.push_back("# excluded (no reference moments): " + r.target_name);
      continue;
    }
    auto& group = groups[r.target_name];
    group.first = r.target_family;
    std::string m = method_id(r, method);
    auto it = group.second.find(m);
    // Duplicate (target, method) rows keep the smaller b2.
    if (it == group.second.end() || *r.b2 < it->second) group.second[m] = *r.b2;
  }

  // Methods present in every usable group.
  std::map<std::string, int> method_counts;
  long usable_groups = 0;
  for (const auto& [t, group] : groups) {
    if (group.second.size() < 2) {
      footer.push_back("# excluded (fewer than 2 methods): " + t);
      continue;
    }
    ++usable_groups;
    for (const auto& [m, b2] : group.second) ++method_counts[m];
  }
  std::set<std::string> common;
  for (const auto& [m, count] : method_counts)
    if (count == usable_groups) common.insert(m);
  for (const auto& [m, count] : method_counts)
    if (count != usable_groups)
      footer.push_back("# excluded (method missing on some targets): " + m);

  // family -> tables
  std::map<std::string, std::vector<metrics::RankTable>> by_scope;
  for (const auto& [t, group] : groups) {
    if (group.second.size() < 2) continue;
    metrics::RankTable table;
    table.target = t;
    for (const auto& m : common) table.b2_by_method[m] = group.second.at(m);
    if (table.b2_by_method.size() < 2) continue;
    std::string key = scope == RankScope::kPerFamily ? group.first : "all";
    by_scope[key].push_back(std::move(table));
  }

  std::ostringstream out;
  out << "method,scope,mean_rank,std_error,n_targets\n";
  for (const auto& [key, tables] : by_scope) {
    std::map<std::string, metrics::MethodAggregate> agg;
    try {
      agg = metrics::aggregate_ranks(tables);
    } catch (const DegenerateRanks&) {
      footer.push_back("# excluded (degenerate ranks): scope " + key);
      continue;
    }
    for (const auto& [m, a] : agg) {
      out << m << "," << key << "," << csv_real(a.mean_rank) << ","
          << (a.std_error ? csv_real(*a.std_error) : "") << "," << a.n_targets
          << "\n";
    }
  }
  for (const auto& line : footer) out << line << "\n";
  return out.str();
}

// ---- CLI ----

namespace {
std::vector<std::string> collect_json_files(const std::string& spec) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  auto add_dir = [&](const fs::path& dir, const std::string& suffix) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      std::string name = entry.path().filename().string();
      if (suffix.empty() || (name.size() >= suffix.size() &&
                             name.compare(name.size() - suffix.size(), suffix.size(),
                                          suffix) == 0))
        files.push_back(entry.path().string());
    }
  };
  auto star = spec.find('*');
  if (star != std::string::npos) {
    fs::path p(spec);
    fs::path dir = p.parent_path().empty() ? "." : p.parent_path();
    std::string pattern = p.filename().string();
    std::string suffix = pattern.substr(pattern.find('*') + 1);
    add_dir(dir, suffix);
  } else if (fs::is_directory(spec)) {
    add_dir(spec, ".json");
  } else if (fs::exists(spec)) {
    files.push_back(spec);
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<ExperimentReport> load_reports(const std::string& spec) {
  std::vector<ExperimentReport> reports;
  for (const auto& file : collect_json_files(spec)) {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      reports.push_back(report_from_json(line));
    }
  }
  return reports;
}
}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Normalizing-flow MCMC benchmarking toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path, config_dir, reports_spec, scope = "global",
                                                               method = "full";
  std::string ndjson_path, csv_path;
  int workers = 1;

  auto* run = app.add_subcommand("run", "Run a single experiment");
  run->add_option("--config", config_path, "Experiment config JSON")->required();
  run->add_option("--out", out_path, "Report output path (overrides config)");

  auto* batch = app.add_subcommand("batch", "Run every config in a directory");
  batch->add_option("--config-dir", config_dir, "Directory of config JSON files")
      ->required();
  batch->add_option("--workers", workers, "Concurrent experiments");
  batch->add_option("--ndjson", ndjson_path, "Write one report JSON per line");
  batch->add_option("--out", csv_path, "Summary CSV path");

  auto* rank = app.add_subcommand("rank", "Aggregate standardized ranks");
  rank->add_option("--reports", reports_spec, "Report file, directory, or glob")
      ->required();
  rank->add_option("--out", out_path, "Rank table CSV path")->required();
  rank->add_option("--scope", scope, "Rank scope: global | family");
  rank->add_option("--method-field", method, "Method identity: full|sampler|flow");

  auto* validate = app.add_subcommand("validate", "Validate a config file");
  validate->add_option("--config", config_path, "Experiment config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) {
      ExperimentConfig config;
      try {
        config = parse_config(config_path);
      } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
      }
      if (!out_path.empty()) config.output_path = out_path;
      ExperimentReport report = run_experiment(config);
      std::printf("%s\n", report_to_json(report).c_str());
      if (!report.ok()) {
        std::fprintf(stderr, "run failed: %s\n", report.error.c_str());
        return 2;
      }
      return 0;
    }
    if (batch->parsed()) {
      auto paths = collect_json_files(config_dir);
      if (paths.empty()) {
        std::fprintf(stderr, "no config files under %s\n", config_dir.c_str());
        return 1;
      }
      BatchOutcome outcome = run_batch(paths, workers, ndjson_path, csv_path);
      std::printf("batch: %d succeeded, %d failed\n", outcome.succeeded,
                  outcome.failed);
      if (outcome.failed == 0) return 0;
      return outcome.succeeded > 0 ? 3 : 2;
    }
    if (rank->parsed()) {
      auto reports = load_reports(reports_spec);
      if (reports.empty()) {
        std::fprintf(stderr, "no reports under %s\n", reports_spec.c_str());
        return 1;
      }
      RankScope rs = scope == "family" ? RankScope::kPerFamily : RankScope::kGlobal;
      MethodField mf = method == "sampler"
                           ? MethodField::kSampler
                           : method == "flow" ? MethodField::kFlow : MethodField::kFull;
      std::ofstream out(out_path);
      if (!out) {
        std::fprintf(stderr, "cannot open %s\n", out_path.c_str());
        return 2;
      }
      out << rank_report_csv(reports, rs, mf);
      return 0;
    }
    if (validate->parsed()) {
      try {
        parse_config(config_path);
        std::printf("ok\n");
        return 0;
      } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
      }
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

}  // namespace nfbench::harness
