// nanf: data-set generation, training, size study, dense search, confirmation
// and reporting for nested anti-resonant fiber designs.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "nanfml/config.hpp"
#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/geometry.hpp"
#include "nanfml/nn.hpp"
#include "nanfml/oracle.hpp"
#include "nanfml/pipeline.hpp"
#include "nanfml/search.hpp"

namespace fs = std::filesystem;
using namespace nanfml;

namespace {

constexpr int kExitError = 1;
constexpr int kExitDiverged = 3;

// Output file names, relative to --out.
namespace file {
constexpr const char* kDataset = "dataset.csv";
constexpr const char* kDatasetSummary = "dataset-summary.csv";
constexpr const char* kClassifier = "classifier.nanf";
constexpr const char* kRegressor = "regressor.nanf";
constexpr const char* kModelInfo = "model.csv";
constexpr const char* kTrainTrial = "train-trial.csv";
constexpr const char* kTrainXi = "train-xi.csv";
constexpr const char* kClassifierCurve = "classifier-curve.csv";
constexpr const char* kRegressorCurve = "regressor-curve.csv";
constexpr const char* kStudyTrials = "study-trials.csv";
constexpr const char* kStudySizes = "study-sizes.csv";
constexpr const char* kStudyXi = "study-xi.csv";
constexpr const char* kStudyKde = "study-kde.csv";
constexpr const char* kRealizations = "realizations.csv";
constexpr const char* kSearchTopK = "search-topk.csv";
constexpr const char* kSearchHistogram = "search-histogram.csv";
constexpr const char* kSearchPredictions = "search-predictions.bin";
constexpr const char* kSearchSummary = "search-summary.csv";
constexpr const char* kConfirm = "confirm.csv";
constexpr const char* kConfirmStats = "confirm-stats.csv";
constexpr const char* kSubsetStudy = "subset-study.csv";
constexpr const char* kReport = "report.csv";
}  // namespace file

// Config keys each command's outputs depend on.
const std::map<std::string, std::vector<std::string_view>>& stage_scopes() {
  static const std::map<std::string, std::vector<std::string_view>> scopes{
      {"gen-dataset", {"oracle", "grid"}},
      {"train", {"oracle", "grid", "run.seed", "train", "classifier", "regressor"}},
      {"study", {"oracle", "grid", "run.seed", "train.threshold", "train.regressor_filter", "classifier", "regressor",
                 "study", "search_space", "search"}},
      {"search", {"oracle", "grid", "run.seed", "train", "classifier", "regressor", "search_space", "search.n",
                  "search.pool_size"}},
      {"confirm", {"oracle", "grid", "run.seed", "train", "classifier", "regressor", "search_space", "search"}},
  };
  return scopes;
}

// Upstream command that produces each input file.
const std::map<std::string, std::string>& producers() {
  static const std::map<std::string, std::string> p{
      {file::kDataset, "gen-dataset"},       {file::kClassifier, "train"},     {file::kRegressor, "train"},
      {file::kModelInfo, "train"},           {file::kSearchTopK, "search"},    {file::kSearchPredictions, "search"},
      {file::kSearchSummary, "search"},
  };
  return p;
}

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "nanf-out";
  std::optional<std::size_t> threads;
};

struct Context {
  RunConfig cfg;
  fs::path out;
  std::string config_sha;

  std::string stage_sha(const std::string& command) const {
    const auto& s = stage_scopes().at(command);
    return sha256_hex(config_identity(cfg, s));
  }
  fs::path at(const char* name) const { return out / name; }
};

Context make_context(const GlobalOptions& g, const std::function<void(RunConfig&)>& adjust = {}) {
  ConfigFile f = g.config.empty() ? ConfigFile{} : ConfigFile::load(g.config);
  for (const auto& name : apply_env_overrides(f)) fmt::print(stderr, "env override: {}\n", name);
  Context ctx;
  ctx.cfg = from_file(f);
  if (g.seed) ctx.cfg.seed = *g.seed;
  if (g.threads) {
    if (*g.threads == 0) throw InvalidArgument("--threads must be >= 1");
    ctx.cfg.threads = *g.threads;
  }
  if (adjust) adjust(ctx.cfg);
  ctx.out = g.out;
  ctx.config_sha = sha256_hex(config_identity(ctx.cfg));
  return ctx;
}

// Checks that an input exists, is the file its producer recorded, and was
// produced under the same settings the current command depends on.
std::string check_input(const Context& ctx, const char* name) {
  const fs::path path = ctx.at(name);
  const std::string& producer = producers().at(name);
  if (!fs::exists(path))
    throw Error("missing upstream artifact '" + path.string() + "' (run '" + producer + "' first)");
  const fs::path mpath = manifest_path(ctx.out, producer);
  if (!fs::exists(mpath)) throw Error("missing manifest '" + mpath.string() + "' for '" + path.string() + "'");
  const Manifest m = Manifest::load(mpath);
  const std::string hash = sha256_file(path);
  const auto it = m.outputs.find(name);
  if (it == m.outputs.end() || it->second != hash)
    throw Error("stale input: '" + path.string() + "' does not match its manifest '" + mpath.string() + "'");
  if (m.stage_sha256 != ctx.stage_sha(producer))
    throw Error("stale input: '" + path.string() + "' was produced by '" + producer +
                "' under different settings (config hash mismatch); rerun '" + producer + "'");
  return hash;
}

void write_manifest(const Context& ctx, const std::string& command, const std::vector<const char*>& inputs,
                    const std::vector<const char*>& outputs, std::map<std::string, std::string> extra = {}) {
  Manifest m;
  m.command = command;
  m.config_sha256 = ctx.config_sha;
  m.stage_sha256 = ctx.stage_sha(command);
  m.seed = ctx.cfg.seed;
  for (auto* name : inputs) m.inputs[name] = sha256_file(ctx.at(name));
  for (auto* name : outputs) m.outputs[name] = sha256_file(ctx.at(name));
  m.extra = std::move(extra);
  m.save(manifest_path(ctx.out, command));
}

std::string key_values(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string out = "key,value\n";
  for (const auto& [k, v] : kv) out += k + "," + v + "\n";
  return out;
}

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  const csv::Table t = csv::read(path, {"key", "value"});
  std::map<std::string, std::string> out;
  for (const auto& r : t.rows) out[r[0]] = r.size() > 1 ? r[1] : "";
  return out;
}

std::size_t to_size(const std::string& v, const std::string& where) {
  return static_cast<std::size_t>(config_detail::parse_uint(where, v));
}

// ---- commands ---------------------------------------------------------------------

int cmd_gen_dataset(const GlobalOptions& g) {
  const Context ctx = make_context(g);
  OutputLock lock(ctx.out);
  const Oracle oracle = Oracle::from_config(ctx.cfg.oracle);
  std::vector<Design> designs;
  std::size_t raw = 0;
  if (ctx.cfg.designs_from_csv) {
    for (const auto& d : oracle.csv_table()->designs()) {
      ++raw;
      if (validate(d, ctx.cfg.grid).accepted()) designs.push_back(d);
    }
  } else {
    raw = ctx.cfg.grid.d_core.count() * ctx.cfg.grid.d_cap.count() * ctx.cfg.grid.alpha.count() *
          ctx.cfg.grid.nest_fraction.count();
    designs = enumerate_grid(ctx.cfg.grid);
  }
  if (designs.empty()) throw Error("no valid designs");
  const LabeledDataset ds = build_dataset(designs, oracle, ctx.cfg.floor_db_km);
  csv::write_text(ctx.at(file::kDataset), format_dataset_csv(ds));
  csv::write_text(ctx.at(file::kDatasetSummary),
                  key_values({{"raw_designs", std::to_string(raw)},
                              {"valid_designs", std::to_string(designs.size())},
                              {"dropped", std::to_string(ds.dropped)},
                              {"rows", std::to_string(ds.size())},
                              {"interesting", std::to_string(ds.interesting_count())},
                              {"floor_db_km", csv::num(ds.floor)}}));
  write_manifest(ctx, "gen-dataset", {}, {file::kDataset, file::kDatasetSummary});
  fmt::print("valid {}  dropped {}  rows {}  interesting {}\n", designs.size(), ds.dropped, ds.size(),
             ds.interesting_count());
  if (ds.size() < kAdvisoryMinDatasetSize)
    fmt::print(stderr, "warning: {} rows is below the advisory minimum of {}\n", ds.size(), kAdvisoryMinDatasetSize);
  return 0;
}

int cmd_train(const GlobalOptions& g, std::optional<std::size_t> n_flag) {
  const Context ctx = make_context(g, [&](RunConfig& c) {
    if (n_flag) c.train_n = *n_flag;
  });
  OutputLock lock(ctx.out);
  const std::string dataset_hash = check_input(ctx, file::kDataset);
  const LabeledDataset master = read_dataset_csv(ctx.at(file::kDataset));
  const std::size_t n = ctx.cfg.train_n;
  if (n > master.size())
    throw InvalidArgument("train.n = " + std::to_string(n) + " exceeds the data set's " +
                          std::to_string(master.size()) + " rows");
  TwoStageOptions opt = ctx.cfg.two_stage();
  if (!opt.regressor) opt.regressor = ctx.cfg.regressor_for(n);
  std::string column = ctx.cfg.regressor_column == "auto" ? regressor_hyperparams_for(n).column
                                                          : ctx.cfg.regressor_column;
  if (ctx.cfg.regressor_hidden || ctx.cfg.regressor_learning_rate || ctx.cfg.regressor_epochs) column += "+overrides";
  fmt::print("training on n = {} ({} hyperparameters)\n", n, column);
  const TrialSeeds seeds = trial_seeds(ctx.cfg.seed, n, master.size(), 0);
  TrialOutput t = run_trial(master, n, 0, seeds, opt);
  t.report.regressor_column = column;
  nn::save(t.training.model.classifier, ctx.at(file::kClassifier));
  nn::save(t.training.model.regressor, ctx.at(file::kRegressor));
  csv::write_text(ctx.at(file::kModelInfo), key_values({{"threshold", csv::num(opt.threshold)},
                                                         {"regressor_column", column},
                                                         {"n", std::to_string(n)}}));
  const std::vector<TrialReport> one{t.report};
  csv::write_text(ctx.at(file::kTrainTrial), trials_csv(one));
  csv::write_text(ctx.at(file::kTrainXi), xi_csv(one));
  csv::write_text(ctx.at(file::kClassifierCurve), t.training.classifier_curve.to_csv());
  csv::write_text(ctx.at(file::kRegressorCurve), t.training.regressor_curve.to_csv());
  write_manifest(ctx, "train", {file::kDataset},
                 {file::kClassifier, file::kRegressor, file::kModelInfo, file::kTrainTrial, file::kTrainXi,
                  file::kClassifierCurve, file::kRegressorCurve},
                 {{"n", std::to_string(n)}, {"dataset_sha256", dataset_hash}});
  fmt::print("test FNR {}  FPR {}  eta {} over {} designs\n", opt_num(t.report.fnr), opt_num(t.report.fpr),
             opt_num(t.report.eta), t.report.xi.size());
  return 0;
}

int cmd_study(const GlobalOptions& g) {
  const Context ctx = make_context(g);
  OutputLock lock(ctx.out);
  check_input(ctx, file::kDataset);
  const LabeledDataset master = read_dataset_csv(ctx.at(file::kDataset));
  SizeStudyOptions opt;
  opt.sizes = ctx.cfg.study_sizes;
  opt.trials = ctx.cfg.study_trials;
  opt.seed = ctx.cfg.seed;
  opt.threads = ctx.cfg.threads;
  opt.two_stage = ctx.cfg.two_stage();
  std::mutex print_mutex;
  opt.on_trial = [&](const TrialReport& r) {
    std::lock_guard lk(print_mutex);
    fmt::print("n {:>6}  trial {:>2}  FNR {:<11} FPR {:<11} eta {}\n", r.n, r.trial, opt_num(r.fnr), opt_num(r.fpr),
               opt_num(r.eta));
    std::fflush(stdout);
  };
  const SizeStudyReport rep = run_size_study(master, opt);
  csv::write_text(ctx.at(file::kStudyTrials), trials_csv(rep.trials));
  csv::write_text(ctx.at(file::kStudySizes), sizes_csv(rep.sizes));
  csv::write_text(ctx.at(file::kStudyXi), xi_csv(rep.trials));
  csv::write_text(ctx.at(file::kStudyKde), kde_csv(rep.sizes));
  std::vector<const char*> outputs{file::kStudyTrials, file::kStudySizes, file::kStudyXi, file::kStudyKde};
  if (ctx.cfg.realizations > 0) {
    RealizationOptions ro;
    ro.n = ctx.cfg.realization_n;
    ro.repeats = ctx.cfg.realizations;
    ro.k = ctx.cfg.k;
    ro.seed = derive_seed(ctx.cfg.seed, 0, 0, 12);
    ro.two_stage = ctx.cfg.two_stage();
    ro.scan.n_target = ctx.cfg.search_n;
    ro.scan.pool_size = std::max(ctx.cfg.pool_size, ctx.cfg.k);
    ro.scan.threads = ctx.cfg.threads;
    ro.scan.seed = derive_seed(ctx.cfg.seed, 0, 0, 10);
    ro.search_space = ctx.cfg.search_space;
    const RealizationReport rr = realization_study(master, Oracle::from_config(ctx.cfg.oracle), ro);
    csv::write_text(ctx.at(file::kRealizations), realization_csv(rr));
    outputs.push_back(file::kRealizations);
    fmt::print("realizations {}  spread cl_p {}  spread cl_t {}\n", rr.trials.size(), csv::num(rr.spread_cl_p),
               csv::num(rr.spread_cl_t));
  }
  write_manifest(ctx, "study", {file::kDataset}, outputs);
  for (const auto& a : rep.sizes)
    fmt::print("n {:>6}  FNR {:<11} FPR {:<11} mean xi {:<11} std xi {}\n", a.n, opt_num(a.fnr), opt_num(a.fpr),
               opt_num(a.mean_xi), opt_num(a.std_xi));
  return 0;
}

int cmd_search(const GlobalOptions& g) {
  const Context ctx = make_context(g);
  OutputLock lock(ctx.out);
  for (auto* name : {file::kClassifier, file::kRegressor, file::kModelInfo}) check_input(ctx, name);
  const auto info = read_key_values(ctx.at(file::kModelInfo));
  TwoStageModel model;
  model.classifier = nn::load(ctx.at(file::kClassifier), nn::Head::kSigmoid);
  model.regressor = nn::load(ctx.at(file::kRegressor), nn::Head::kLinear);
  model.threshold = csv::parse_double(info.at("threshold"), file::kModelInfo);
  model.regressor_column = info.at("regressor_column");
  ScanOptions opt;
  opt.n_target = ctx.cfg.search_n;
  opt.seed = derive_seed(ctx.cfg.seed, 0, 0, 10);
  opt.pool_size = ctx.cfg.pool_size;
  opt.threads = ctx.cfg.threads;
  const auto t0 = std::chrono::steady_clock::now();
  const SearchResult r = scan(model, ctx.cfg.search_space, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  csv::write_text(ctx.at(file::kSearchTopK), pool_csv(r.pool));
  csv::write_text(ctx.at(file::kSearchHistogram), r.histogram.to_csv());
  save_predictions(r.predictions, ctx.at(file::kSearchPredictions));
  csv::write_text(ctx.at(file::kSearchSummary), key_values({{"evaluated", std::to_string(r.evaluated)},
                                                             {"accepted", std::to_string(r.accepted)},
                                                             {"pool", std::to_string(r.pool.size())},
                                                             {"scan_seed", std::to_string(r.seed)},
                                                             {"best_cl_p", r.pool.empty() ? "" : csv::num(r.pool.front().cl_p)}}));
  write_manifest(ctx, "search", {file::kClassifier, file::kRegressor, file::kModelInfo},
                 {file::kSearchTopK, file::kSearchHistogram, file::kSearchPredictions, file::kSearchSummary});
  fmt::print("evaluated {}  accepted {}  best cl_p {} dB/km  ({:.1f} s)\n", r.evaluated, r.accepted,
             r.pool.empty() ? std::string("-") : csv::num(r.pool.front().cl_p), secs);
  return 0;
}

int cmd_confirm(const GlobalOptions& g) {
  const Context ctx = make_context(g);
  OutputLock lock(ctx.out);
  for (auto* name : {file::kSearchTopK, file::kSearchPredictions, file::kSearchSummary}) check_input(ctx, name);
  SearchResult r;
  r.pool = read_pool_csv(ctx.at(file::kSearchTopK));
  r.predictions = load_predictions(ctx.at(file::kSearchPredictions));
  const auto summary = read_key_values(ctx.at(file::kSearchSummary));
  r.accepted = to_size(summary.at("accepted"), file::kSearchSummary);
  r.evaluated = to_size(summary.at("evaluated"), file::kSearchSummary);
  const ConfirmationReport rep =
      confirm_top_k(r, Oracle::from_config(ctx.cfg.oracle), ctx.cfg.k, ctx.cfg.min_distance);
  std::vector<std::size_t> sizes;
  for (auto m : ctx.cfg.subset_sizes)
    if (m <= r.accepted) sizes.push_back(m);
  if (r.accepted > 0) sizes.push_back(r.accepted);
  const auto pts = subset_study(r, sizes, ctx.cfg.subset_repeats, derive_seed(ctx.cfg.seed, 0, 0, 11));
  csv::write_text(ctx.at(file::kConfirm), confirmation_csv(rep));
  csv::write_text(ctx.at(file::kConfirmStats), confirmation_stats(rep));
  csv::write_text(ctx.at(file::kSubsetStudy), subset_csv(pts));
  write_manifest(ctx, "confirm", {file::kSearchTopK, file::kSearchPredictions, file::kSearchSummary},
                 {file::kConfirm, file::kConfirmStats, file::kSubsetStudy});
  fmt::print("k {}  best cl_p {}  its cl_t {}  min cl_t {} dB/km\n", rep.rows.size(), csv::num(rep.rows.front().cl_p),
             csv::num(rep.rows.front().cl_t), csv::num(rep.min_cl_t));
  return 0;
}

// Collects the summaries of every command that has run into one key/value
// file, after checking that all manifests agree with the current config and
// that no recorded file has changed since.
int cmd_report(const GlobalOptions& g) {
  const Context ctx = make_context(g);
  const std::vector<std::string> order{"gen-dataset", "train", "study", "search", "confirm"};
  std::vector<std::string> present;
  for (const auto& c : order)
    if (fs::exists(manifest_path(ctx.out, c))) present.push_back(c);
  if (std::find(present.begin(), present.end(), "gen-dataset") == present.end()) {
    std::string expected;
    for (const auto& c : order) expected += "\n  " + manifest_path(ctx.out, c).string();
    expected += "\nat least the gen-dataset manifest and its outputs must exist";
    throw Error("nothing to report in '" + ctx.out.string() + "'; expected files:" + expected);
  }
  OutputLock lock(ctx.out);
  std::vector<std::pair<std::string, std::string>> kv;
  std::vector<std::string> problems;
  std::map<std::string, std::string> current_hash;
  for (const auto& c : present) {
    const Manifest m = Manifest::load(manifest_path(ctx.out, c));
    if (m.stage_sha256 != ctx.stage_sha(c)) problems.push_back(c + ": produced under a different config");
    for (const auto& [name, hash] : m.outputs) {
      const fs::path p = ctx.out / name;
      if (!fs::exists(p)) {
        problems.push_back(c + ": output '" + name + "' is missing");
        continue;
      }
      current_hash[name] = sha256_file(p);
      if (current_hash[name] != hash) problems.push_back(c + ": output '" + name + "' changed since it was written");
    }
    for (const auto& [name, hash] : m.inputs) {
      const fs::path p = ctx.out / name;
      if (!fs::exists(p) || sha256_file(p) != hash)
        problems.push_back(c + ": input '" + name + "' no longer matches what it was run on");
    }
    kv.emplace_back(c + ".stage_sha256", m.stage_sha256);
    kv.emplace_back(c + ".seed", std::to_string(m.seed));
  }
  if (!problems.empty()) {
    std::string msg = "manifest check failed:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw Error(msg);
  }
  auto add_file = [&](const std::string& prefix, const char* name) {
    for (const auto& [k, v] : read_key_values(ctx.at(name))) kv.emplace_back(prefix + "." + k, v);
  };
  add_file("dataset", file::kDatasetSummary);
  if (current_hash.count(file::kModelInfo)) {
    add_file("model", file::kModelInfo);
    const csv::Table t = csv::read(ctx.at(file::kTrainTrial), {"n", "trial"});
    for (const char* col : {"fnr", "fpr", "eta", "s_n"}) kv.emplace_back(std::string("train.") + col, t.rows.at(0).at(t.column(col)));
  }
  if (current_hash.count(file::kStudySizes)) {
    const csv::Table t = csv::read(ctx.at(file::kStudySizes), {"n"});
    for (const auto& row : t.rows)
      for (const char* col : {"fnr", "fpr", "mean_xi", "std_xi"})
        kv.emplace_back("study.n" + row[0] + "." + col, row[t.column(col)]);
  }
  if (current_hash.count(file::kSearchSummary)) add_file("search", file::kSearchSummary);
  if (current_hash.count(file::kConfirmStats)) add_file("confirm", file::kConfirmStats);
  for (const auto& [name, hash] : current_hash)
    if (name.ends_with(".csv")) kv.emplace_back("file." + name, hash);
  csv::write_text(ctx.at(file::kReport), key_values(kv));
  fmt::print("report: {} ({} commands checked)\n", ctx.at(file::kReport).string(), present.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Design-space search for nested anti-resonant fibers with a two-stage neural surrogate"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Config file (key = value with [section] headers)")
      ->envname("NANF_CONFIG")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides run.seed)")->envname("NANF_SEED");
  app.add_option("--out", g.out, "Output directory")->envname("NANF_OUT");
  app.add_option("--threads", g.threads, "Worker threads (overrides run.threads)")->envname("NANF_THREADS");

  std::optional<std::size_t> n_flag;
  auto* gen = app.add_subcommand("gen-dataset", "Enumerate the grid, evaluate the oracle, write the data set");
  auto* train = app.add_subcommand("train", "Train one two-stage model on n rows of the data set");
  train->add_option("--n", n_flag, "Data-set size (overrides train.n)");
  auto* study = app.add_subcommand("study", "Repeated training over data-set sizes");
  auto* search = app.add_subcommand("search", "Dense scan of the search space with the trained model");
  auto* confirm = app.add_subcommand("confirm", "Confirm the best designs with the oracle; subset study");
  auto* report = app.add_subcommand("report", "Check manifests and collect all summaries");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_dataset(g);
    if (train->parsed()) return cmd_train(g, n_flag);
    if (study->parsed()) return cmd_study(g);
    if (search->parsed()) return cmd_search(g);
    if (confirm->parsed()) return cmd_confirm(g);
    if (report->parsed()) return cmd_report(g);
  } catch (const TrainingDiverged& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitError;
}
