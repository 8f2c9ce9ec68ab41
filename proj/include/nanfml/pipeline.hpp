#pragma once

// Two-stage model: a classifier that gates designs as interesting, and a
// regressor of log10(confinement loss) trained only on designs the frozen
// classifier accepts. Also the evaluation statistics used across trials.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/nn.hpp"
#include "nanfml/oracle.hpp"

namespace nanfml {

inline constexpr std::size_t kRegressor2MaxRows = 9000;
inline constexpr double kRegressorErrorCap = 6.3;  // dB/km
inline constexpr std::size_t kAdvisoryMinDatasetSize = 1600;

// Which rows train the regressor: those the frozen classifier accepts, or
// those whose ground truth is interesting.
enum class RegressorFilter { kClassifier, kGroundTruth };

struct StageHyperparams {
  nn::Hyperparams hp;
  std::string column;  // "classifier", "regressor-1" or "regressor-2"
};

inline StageHyperparams regressor_hyperparams_for(std::size_t n) {
  if (n <= kRegressor2MaxRows) return {nn::regressor2_hyperparams(), "regressor-2"};
  return {nn::regressor1_hyperparams(), "regressor-1"};
}

struct TwoStageModel {
  nn::Mlp classifier;
  nn::Mlp regressor;
  double threshold = 0.5;
  std::string regressor_column;

  bool accepts(const nn::FeatureVector& x) const { return classifier.forward(x) >= threshold; }

  // Predicted loss in dB/km, or nothing when the classifier rejects the design.
  std::optional<double> predict_loss(const nn::FeatureVector& x) const {
    if (!accepts(x)) return std::nullopt;
    return std::pow(10.0, regressor.forward(x));
  }
};

inline nn::TrainingSet classifier_set(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  nn::TrainingSet s;
  s.features.reserve(rows.size());
  s.targets.reserve(rows.size());
  for (auto i : rows) {
    s.features.push_back(nn::featurize(ds.rows[i].design, ds.rows[i].geom));
    s.targets.push_back(ds.rows[i].interesting ? 1.0 : 0.0);
  }
  return s;
}

inline std::vector<std::size_t> accepted_rows(const LabeledDataset& ds, std::span<const std::size_t> rows,
                                              const nn::Mlp& classifier, double threshold, RegressorFilter filter) {
  std::vector<std::size_t> out;
  if (filter == RegressorFilter::kGroundTruth) {
    for (auto i : rows)
      if (ds.rows[i].interesting) out.push_back(i);
    return out;
  }
  std::vector<nn::FeatureVector> xs;
  xs.reserve(rows.size());
  for (auto i : rows) xs.push_back(nn::featurize(ds.rows[i].design, ds.rows[i].geom));
  const auto scores = nn::predict_batch(classifier, xs);
  for (std::size_t k = 0; k < rows.size(); ++k)
    if (scores[k] >= threshold) out.push_back(rows[k]);
  return out;
}

inline nn::TrainingSet regressor_set(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  nn::TrainingSet s;
  s.features.reserve(rows.size());
  s.targets.reserve(rows.size());
  for (auto i : rows) {
    s.features.push_back(nn::featurize(ds.rows[i].design, ds.rows[i].geom));
    s.targets.push_back(std::log10(ds.rows[i].truth.cl_fund));
  }
  return s;
}

struct TwoStageOptions {
  nn::Hyperparams classifier = nn::classifier_hyperparams();
  std::optional<nn::Hyperparams> regressor;  // defaults to the column chosen by data-set size
  double threshold = 0.5;
  RegressorFilter filter = RegressorFilter::kClassifier;
};

struct TwoStageTraining {
  TwoStageModel model;
  nn::LossCurve classifier_curve;
  nn::LossCurve regressor_curve;
  std::size_t train_rows = 0;
  std::size_t regressor_train_rows = 0;
};

inline nn::TrainResult train_classifier_stage(const LabeledDataset& ds, const Partition& p,
                                              const nn::Hyperparams& hp) {
  if (p.train.empty()) throw InvalidArgument("training split is empty");
  return nn::train(classifier_set(ds, p.train), classifier_set(ds, p.validation), hp, nn::Objective::kBce);
}

// Second stage with the classifier frozen. Without explicit hyperparameters
// the data-set size selects the regressor column. The regressor is always
// initialized from the classifier seed + 1.
inline void train_regressor_stage(const LabeledDataset& ds, const Partition& p, const TwoStageOptions& opt,
                                  TwoStageTraining& out) {
  const auto train_rows = accepted_rows(ds, p.train, out.model.classifier, opt.threshold, opt.filter);
  if (train_rows.empty())
    throw Error("regressor training subset is empty: the classifier rejects every training design");
  const auto val_rows = accepted_rows(ds, p.validation, out.model.classifier, opt.threshold, opt.filter);
  const StageHyperparams column = regressor_hyperparams_for(ds.size());
  nn::Hyperparams hp = opt.regressor.value_or(column.hp);
  hp.seed = opt.classifier.seed + 1;
  auto reg = nn::train(regressor_set(ds, train_rows), regressor_set(ds, val_rows), hp, nn::Objective::kNmse);
  out.model.regressor = std::move(reg.model);
  out.model.regressor_column = opt.regressor ? "custom" : column.column;
  out.regressor_curve = std::move(reg.curve);
  out.regressor_train_rows = train_rows.size();
}

inline TwoStageTraining train_two_stage(const LabeledDataset& ds, const Partition& p, const TwoStageOptions& opt) {
  if (!(opt.threshold > 0.0 && opt.threshold < 1.0)) throw InvalidArgument("classifier threshold must be in (0, 1)");
  TwoStageTraining out;
  out.train_rows = p.train.size();
  auto cls = train_classifier_stage(ds, p, opt.classifier);
  out.model.classifier = std::move(cls.model);
  out.model.threshold = opt.threshold;
  out.classifier_curve = std::move(cls.curve);
  train_regressor_stage(ds, p, opt, out);
  return out;
}

// ---- classification statistics ---------------------------------------------

struct Confusion {
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;

  std::size_t total() const { return tp + fn + fp + tn; }
  std::optional<double> fnr() const {
    if (fn + tp == 0) return std::nullopt;
    return static_cast<double>(fn) / static_cast<double>(fn + tp);
  }
  std::optional<double> fpr() const {
    if (fp + tn == 0) return std::nullopt;
    return static_cast<double>(fp) / static_cast<double>(fp + tn);
  }
};

// predicted[i] / actual[i] are 1 for "interesting".
inline Confusion confusion_counts(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> actual) {
  if (predicted.size() != actual.size()) throw InvalidArgument("confusion: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (actual[i]) (predicted[i] ? c.tp : c.fn)++;
    else (predicted[i] ? c.fp : c.tn)++;
  }
  return c;
}

inline Confusion classify(const nn::Mlp& classifier, double threshold, const LabeledDataset& ds,
                          std::span<const std::size_t> rows) {
  std::vector<nn::FeatureVector> xs;
  xs.reserve(rows.size());
  for (auto i : rows) xs.push_back(nn::featurize(ds.rows[i].design, ds.rows[i].geom));
  const auto scores = nn::predict_batch(classifier, xs);
  std::vector<std::uint8_t> pred(rows.size()), truth(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    pred[k] = scores[k] >= threshold;
    truth[k] = ds.rows[rows[k]].interesting;
  }
  return confusion_counts(pred, truth);
}

// ---- regression statistics -------------------------------------------------

inline double relative_error(double cl_true, double cl_pred) { return std::abs((cl_true - cl_pred) / cl_true); }

struct RegressorError {
  std::vector<double> xi;  // one per test design with cl_t <= cap
  double eta = 0.0;        // mean of xi
};

// The regressor is evaluated on every test design whose true loss is at most
// `cap`; nothing is returned when there is no such design.
inline std::optional<RegressorError> regressor_error(const nn::Mlp& regressor, const LabeledDataset& ds,
                                                     std::span<const std::size_t> rows,
                                                     double cap = kRegressorErrorCap) {
  std::vector<nn::FeatureVector> xs;
  std::vector<double> truth;
  for (auto i : rows)
    if (ds.rows[i].truth.cl_fund <= cap) {
      xs.push_back(nn::featurize(ds.rows[i].design, ds.rows[i].geom));
      truth.push_back(ds.rows[i].truth.cl_fund);
    }
  if (xs.empty()) return std::nullopt;
  const auto y = nn::predict_batch(regressor, xs);
  RegressorError e;
  e.xi.reserve(xs.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    e.xi.push_back(relative_error(truth[k], std::pow(10.0, y[k])));
    sum += e.xi.back();
  }
  e.eta = sum / static_cast<double>(e.xi.size());
  return e;
}

// ---- small statistics --------------------------------------------------------

// Shifted by the first element, so a sample of identical values has exactly
// that value as its mean.
inline double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x - v.front();
  return v.front() + s / static_cast<double>(v.size());
}

// Sample standard deviation (divisor k - 1) of the k best losses.
inline double std_best_k(std::span<const double> losses) {
  if (losses.size() < 2) throw InvalidArgument("std_best_k needs at least two losses");
  const double m = mean(losses);
  double acc = 0.0;
  for (double x : losses) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(losses.size() - 1));
}

// delta_j = L_1 - L_j, where L_1 belongs to the design ranked best.
inline std::vector<double> delta_cl(std::span<const double> losses) {
  std::vector<double> out;
  out.reserve(losses.size());
  for (double x : losses) out.push_back(losses.front() - x);
  return out;
}

// Linear-interpolated quantile of unsorted data, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw InvalidArgument("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct KdeCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

inline constexpr std::size_t kKdeGridPoints = 512;

// Silverman's rule of thumb: 0.9 min(sd, IQR / 1.34) n^(-1/5).
inline double silverman_bandwidth(std::span<const double> samples) {
  const std::vector<double> v(samples.begin(), samples.end());
  const double m = mean(samples);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  const double sd = std::sqrt(acc / static_cast<double>(v.size() - 1));
  const double iqr = quantile(v, 0.75) - quantile(v, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(static_cast<double>(v.size()), -0.2);
}

struct KdeOptions {
  std::optional<double> bandwidth;  // Silverman when absent
  std::optional<double> lo, hi;     // default grid [0, 1.1 max]
};

// Gaussian-kernel density on a uniform 512-point grid, rescaled so its
// trapezoid integral over the grid is exactly one.
inline KdeCurve kde(std::span<const double> samples, const KdeOptions& opt = {}) {
  if (samples.size() < 2) throw InvalidArgument("kde needs at least two samples");
  const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
  if (*mn == *mx) throw InvalidArgument("kde: all samples identical, bandwidth is degenerate");
  KdeCurve c;
  c.bandwidth = opt.bandwidth.value_or(silverman_bandwidth(samples));
  if (!(c.bandwidth > 0.0)) throw InvalidArgument("kde: bandwidth must be positive");
  const double lo = opt.lo.value_or(0.0), hi = opt.hi.value_or(*mx * 1.1);
  if (!(hi > lo)) throw InvalidArgument("kde: empty grid range");
  const double step = (hi - lo) / static_cast<double>(kKdeGridPoints - 1);
  const double norm = 1.0 / (static_cast<double>(samples.size()) * c.bandwidth * std::sqrt(2.0 * std::numbers::pi));
  c.x.resize(kKdeGridPoints);
  c.density.resize(kKdeGridPoints);
  for (std::size_t i = 0; i < kKdeGridPoints; ++i) {
    c.x[i] = lo + step * static_cast<double>(i);
    double s = 0.0;
    for (double v : samples) {
      const double u = (c.x[i] - v) / c.bandwidth;
      s += std::exp(-0.5 * u * u);
    }
    c.density[i] = s * norm;
  }
  double mass = 0.0;
  for (std::size_t i = 0; i + 1 < kKdeGridPoints; ++i) mass += 0.5 * (c.density[i] + c.density[i + 1]) * step;
  if (!(mass > 0.0)) throw InvalidArgument("kde: no density mass on the grid");
  for (double& d : c.density) d /= mass;
  return c;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) s += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]);
  return s;
}

// ---- trials and the data-set size study ------------------------------------

// Deterministic 64-bit seed for one (base, n, trial, stream) combination.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t n, std::uint64_t trial, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(n),    static_cast<std::uint32_t>(trial),
                    static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct TrialSeeds {
  std::uint64_t subset = 0;
  std::uint64_t partition = 0;
  std::uint64_t init = 0;
};

struct TrialReport {
  std::size_t n = 0;
  std::size_t trial = 0;
  TrialSeeds seeds;
  Confusion confusion;
  std::optional<double> fnr, fpr;
  std::vector<double> xi;
  std::optional<double> eta;
  std::string regressor_column;
  std::size_t train_rows = 0;
  std::size_t regressor_train_rows = 0;
  double classifier_val_loss = 0.0;
  double regressor_val_loss = 0.0;
};

struct TrialOutput {
  TrialReport report;
  TwoStageTraining training;
  LabeledDataset subset;
  Partition partition;
};

// One trial: the n-row subset (the master itself when n equals its size),
// its partition, the two-stage model and its test-split statistics.
inline TrialOutput run_trial(const LabeledDataset& master, std::size_t n, std::size_t trial, const TrialSeeds& seeds,
                             TwoStageOptions opt) {
  TrialOutput out;
  out.subset = n == master.size() ? master : subsample(master, n, seeds.subset);
  out.subset.splits.clear();
  out.partition = partition(out.subset, seeds.partition);
  opt.classifier.seed = seeds.init;
  out.training = train_two_stage(out.subset, out.partition, opt);
  auto& r = out.report;
  r.n = n;
  r.trial = trial;
  r.seeds = seeds;
  r.confusion = classify(out.training.model.classifier, opt.threshold, out.subset, out.partition.test);
  r.fnr = r.confusion.fnr();
  r.fpr = r.confusion.fpr();
  if (auto e = regressor_error(out.training.model.regressor, out.subset, out.partition.test)) {
    r.xi = std::move(e->xi);
    r.eta = e->eta;
  }
  r.regressor_column = out.training.model.regressor_column;
  r.train_rows = out.training.train_rows;
  r.regressor_train_rows = out.training.regressor_train_rows;
  r.classifier_val_loss = out.training.model.classifier.meta().best_validation_loss;
  r.regressor_val_loss = out.training.model.regressor.meta().best_validation_loss;
  return out;
}

// For n equal to the master size only the partition varies between trials;
// otherwise each trial draws its own subset.
inline TrialSeeds trial_seeds(std::uint64_t base, std::size_t n, std::size_t master_size, std::size_t trial) {
  TrialSeeds s;
  s.subset = n == master_size ? 0 : derive_seed(base, n, trial, 1);
  s.partition = derive_seed(base, n, trial, 2);
  s.init = derive_seed(base, n, trial, 3);
  return s;
}

struct SizeAggregate {
  std::size_t n = 0;
  std::size_t trials = 0;
  std::optional<double> fnr, fpr;  // mean of per-trial rates
  std::size_t fnr_trials = 0, fpr_trials = 0;
  std::optional<double> mean_xi;   // mean of per-trial eta
  std::optional<double> std_xi;    // sample std of per-trial eta
  std::size_t xi_trials = 0;       // trials with a non-empty S_n
  std::optional<KdeCurve> xi_density;
};

struct SizeStudyReport {
  std::vector<TrialReport> trials;  // sorted by (n, trial)
  std::vector<SizeAggregate> sizes;
};

// Means of the per-trial rates, not pooled counts.
inline SizeAggregate aggregate_trials(std::size_t n, std::span<const TrialReport> trials) {
  SizeAggregate a;
  a.n = n;
  a.trials = trials.size();
  std::vector<double> fnrs, fprs, etas, all_xi;
  for (const auto& t : trials) {
    if (t.fnr) fnrs.push_back(*t.fnr);
    if (t.fpr) fprs.push_back(*t.fpr);
    if (t.eta) etas.push_back(*t.eta);
    all_xi.insert(all_xi.end(), t.xi.begin(), t.xi.end());
  }
  a.fnr_trials = fnrs.size();
  a.fpr_trials = fprs.size();
  a.xi_trials = etas.size();
  if (!fnrs.empty()) a.fnr = mean(fnrs);
  if (!fprs.empty()) a.fpr = mean(fprs);
  if (!etas.empty()) a.mean_xi = mean(etas);
  if (etas.size() >= 2) a.std_xi = std_best_k(etas);
  if (all_xi.size() >= 2) {
    const auto [mn, mx] = std::minmax_element(all_xi.begin(), all_xi.end());
    if (*mn != *mx) a.xi_density = kde(all_xi);
  }
  return a;
}

// Runs `count` independent jobs on up to `threads` workers; results land at
// their job index so the outcome does not depend on scheduling.
template <class Job>
auto parallel_indexed(std::size_t count, std::size_t threads, Job job) {
  using R = decltype(job(std::size_t{0}));
  std::vector<std::optional<R>> results(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        results[i] = job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(threads, count));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<R> out;
  out.reserve(count);
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

struct SizeStudyOptions {
  std::vector<std::size_t> sizes;
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  TwoStageOptions two_stage;
  std::function<void(const TrialReport&)> on_trial;  // progress hook
};

inline SizeStudyReport run_size_study(const LabeledDataset& master, const SizeStudyOptions& opt) {
  for (auto n : opt.sizes)
    if (n > master.size())
      throw InvalidArgument("study size " + std::to_string(n) + " exceeds master data set size " +
                            std::to_string(master.size()));
  std::vector<std::size_t> sizes = opt.sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (auto n : sizes)
    for (std::size_t t = 0; t < opt.trials; ++t) jobs.emplace_back(n, t);
  auto reports = parallel_indexed(jobs.size(), opt.threads, [&](std::size_t j) {
    const auto [n, t] = jobs[j];
    auto r = run_trial(master, n, t, trial_seeds(opt.seed, n, master.size(), t), opt.two_stage).report;
    if (opt.on_trial) opt.on_trial(r);
    return r;
  });
  SizeStudyReport study;
  study.trials = std::move(reports);
  for (auto n : sizes) {
    std::vector<TrialReport> of_n;
    for (const auto& r : study.trials)
      if (r.n == n) of_n.push_back(r);
    study.sizes.push_back(aggregate_trials(n, of_n));
  }
  return study;
}

// ---- report files ------------------------------------------------------------

inline std::string opt_num(const std::optional<double>& v) { return v ? csv::num(*v) : ""; }

inline std::string trials_csv(std::span<const TrialReport> trials) {
  std::string out =
      "n,trial,subset_seed,partition_seed,init_seed,tp,fn,fp,tn,fnr,fpr,eta,s_n,regressor,train_rows,"
      "regressor_train_rows,classifier_val_loss,regressor_val_loss\n";
  for (const auto& t : trials)
    out += std::to_string(t.n) + "," + std::to_string(t.trial) + "," + std::to_string(t.seeds.subset) + "," +
           std::to_string(t.seeds.partition) + "," + std::to_string(t.seeds.init) + "," +
           std::to_string(t.confusion.tp) + "," + std::to_string(t.confusion.fn) + "," +
           std::to_string(t.confusion.fp) + "," + std::to_string(t.confusion.tn) + "," + opt_num(t.fnr) + "," +
           opt_num(t.fpr) + "," + opt_num(t.eta) + "," + std::to_string(t.xi.size()) + "," + t.regressor_column +
           "," + std::to_string(t.train_rows) + "," + std::to_string(t.regressor_train_rows) + "," +
           csv::num(t.classifier_val_loss) + "," + csv::num(t.regressor_val_loss) + "\n";
  return out;
}

inline std::string sizes_csv(std::span<const SizeAggregate> sizes) {
  std::string out = "n,trials,fnr,fpr,fnr_trials,fpr_trials,mean_xi,std_xi,xi_trials\n";
  for (const auto& a : sizes)
    out += std::to_string(a.n) + "," + std::to_string(a.trials) + "," + opt_num(a.fnr) + "," + opt_num(a.fpr) + "," +
           std::to_string(a.fnr_trials) + "," + std::to_string(a.fpr_trials) + "," + opt_num(a.mean_xi) + "," +
           opt_num(a.std_xi) + "," + std::to_string(a.xi_trials) + "\n";
  return out;
}

inline std::string xi_csv(std::span<const TrialReport> trials) {
  std::string out = "n,trial,xi\n";
  for (const auto& t : trials)
    for (double x : t.xi) out += std::to_string(t.n) + "," + std::to_string(t.trial) + "," + csv::num(x) + "\n";
  return out;
}

inline std::string kde_csv(std::span<const SizeAggregate> sizes) {
  std::string out = "n,bandwidth,x,density\n";
  for (const auto& a : sizes)
    if (a.xi_density)
      for (std::size_t i = 0; i < a.xi_density->x.size(); ++i)
        out += std::to_string(a.n) + "," + csv::num(a.xi_density->bandwidth) + "," + csv::num(a.xi_density->x[i]) +
               "," + csv::num(a.xi_density->density[i]) + "\n";
  return out;
}

}  // namespace nanfml
