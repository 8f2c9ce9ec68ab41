#pragma once

// Ground truth for designs: an external-solver table (CSV) or a deterministic
// analytic surrogate, plus labeling and data-set assembly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/geometry.hpp"

namespace nanfml {

struct GroundTruth {
  double cl_fund = 0.0;  // dB/km, fundamental mode
  double cl_ho1 = 0.0;   // dB/km, first higher-order mode
  double sr = 0.0;       // cl_ho1 - cl_fund

  static GroundTruth from_losses(double cl_fund, double cl_ho1) { return {cl_fund, cl_ho1, cl_ho1 - cl_fund}; }
};

inline constexpr double kInterestingMinSr = 50.0;    // inclusive
inline constexpr double kInterestingMaxCl = 1000.0;  // exclusive

inline bool is_interesting(const GroundTruth& t) {
  return t.sr >= kInterestingMinSr && t.cl_fund < kInterestingMaxCl;
}

struct LabeledDesign {
  Design design;
  DerivedGeometry geom;
  GroundTruth truth;
  bool interesting = false;
};

inline LabeledDesign label(const Design& d, const GroundTruth& t) {
  return {d, derive_geometry(d), t, is_interesting(t)};
}

// Constants of the closed-form surrogate
//   log10(cl_fund) = intercept - core_slope log10(d_core / core_ref)
//                    + sum_k w_k (x_k - c_k)^2 + osc sin(osc_rho rho) sin(osc_alpha alpha + osc_delta delta)
//   sr = sr_peak exp(-((rho - sr_rho0)/sr_rho_w)^2) exp(-((alpha - sr_alpha0)/sr_alpha_w)^2) + sr_offset
// with rho the nest ratio, delta = d_cap / d_core and g the gap.
struct SurrogateConstants {
  double intercept = 0.2;
  double core_slope = 3.0;
  double core_ref = 20.0;
  double delta_weight = 6.0, delta_center = 1.67;
  double rho_weight = 8.0, rho_center = 0.60;
  double alpha_weight = 4.0, alpha_center = 0.22;
  double gap_weight = 0.1, gap_center = 4.5;
  double osc_amplitude = 0.5, osc_rho = 7.0, osc_alpha = 5.0, osc_delta = 2.0;
  double sr_peak = 115.0, sr_rho0 = 0.62, sr_rho_width = 0.30;
  double sr_alpha0 = 0.25, sr_alpha_width = 0.35, sr_offset = -5.0;
};

inline constexpr double kMinHigherOrderLoss = 1e-3;

class SurrogateOracle {
 public:
  explicit SurrogateOracle(SurrogateConstants c = {}) : c_(c) {}

  const SurrogateConstants& constants() const { return c_; }

  GroundTruth evaluate(const Design& d) const {
    const DerivedGeometry g = derive_geometry(d);
    const double rho = g.nest_ratio;
    const double delta = d.d_cap / d.d_core;
    const auto sq = [](double x) { return x * x; };
    const double log_cl = c_.intercept - c_.core_slope * std::log10(d.d_core / c_.core_ref) +
                          c_.delta_weight * sq(delta - c_.delta_center) + c_.rho_weight * sq(rho - c_.rho_center) +
                          c_.alpha_weight * sq(d.alpha - c_.alpha_center) + c_.gap_weight * sq(g.gap - c_.gap_center) +
                          c_.osc_amplitude * std::sin(c_.osc_rho * rho) *
                              std::sin(c_.osc_alpha * d.alpha + c_.osc_delta * delta);
    const double cl_fund = std::pow(10.0, log_cl);
    const double sr = c_.sr_peak * std::exp(-sq((rho - c_.sr_rho0) / c_.sr_rho_width)) *
                          std::exp(-sq((d.alpha - c_.sr_alpha0) / c_.sr_alpha_width)) +
                      c_.sr_offset;
    double cl_ho1 = cl_fund + sr;
    if (cl_ho1 <= 0.0) cl_ho1 = kMinHigherOrderLoss;
    if (!std::isfinite(cl_fund) || !std::isfinite(cl_ho1) || cl_fund <= 0.0)
      throw Error("surrogate produced a non-finite loss");
    return GroundTruth::from_losses(cl_fund, cl_ho1);
  }

 private:
  SurrogateConstants c_;
};

// Lookup key: design fields rounded to 6 decimals.
using DesignKey = std::array<std::int64_t, 4>;

inline DesignKey design_key(const Design& d) {
  const auto r = [](double v) { return static_cast<std::int64_t>(std::llround(v * 1e6)); };
  return {r(d.d_core), r(d.d_cap), r(d.alpha), r(d.d_nest)};
}

inline const std::vector<std::string>& ground_truth_columns() {
  static const std::vector<std::string> cols{"d_core", "d_cap", "alpha", "d_nest", "cl_fund_db_km", "cl_ho1_db_km"};
  return cols;
}

class CsvOracle {
 public:
  static CsvOracle load(const std::filesystem::path& path) {
    // Columns are matched by name; extra columns are ignored.
    const csv::Table t = csv::read(path, {});
    std::vector<std::size_t> col;
    for (const auto& name : ground_truth_columns()) {
      try {
        col.push_back(t.column(name));
      } catch (const CorruptFile& e) {
        throw CorruptFile("'" + path.string() + "': " + e.what());
      }
    }
    CsvOracle o;
    o.source_ = path;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto& row = t.rows[i];
      const std::string where = path.string() + " row " + std::to_string(i + 2);
      auto field = [&](std::size_t c) { return csv::parse_double(row[col[c]], where); };
      Design d{field(0), field(1), field(2), field(3)};
      const double cl = field(4), ho = field(5);
      if (!(cl > 0.0) || !(ho > 0.0)) throw CorruptFile(where + ": losses must be positive");
      o.table_[design_key(d)] = {d, GroundTruth::from_losses(cl, ho)};
    }
    return o;
  }

  void insert(const Design& d, const GroundTruth& t) { table_[design_key(d)] = {d, t}; }

  GroundTruth evaluate(const Design& d) const {
    const auto it = table_.find(design_key(d));
    if (it == table_.end())
      throw CsvMiss("design (" + csv::num(d.d_core) + ", " + csv::num(d.d_cap) + ", " + csv::num(d.alpha) + ", " +
                    csv::num(d.d_nest) + ") not found in ground-truth table '" + source_.string() + "'");
    return it->second.second;
  }

  std::size_t size() const { return table_.size(); }

  std::vector<Design> designs() const {
    std::vector<Design> out;
    out.reserve(table_.size());
    for (const auto& [key, row] : table_) out.push_back(row.first);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::filesystem::path source_;
  std::map<DesignKey, std::pair<Design, GroundTruth>> table_;
};

enum class OracleMode { kSurrogate, kCsv };

struct OracleConfig {
  OracleMode mode = OracleMode::kSurrogate;
  std::filesystem::path csv_path;
  SurrogateConstants surrogate;
  double wavelength_um = 1.4;
};

class Oracle {
 public:
  Oracle(SurrogateOracle s) : impl_(std::move(s)) {}
  Oracle(CsvOracle c) : impl_(std::move(c)) {}

  static Oracle from_config(const OracleConfig& cfg) {
    if (cfg.mode == OracleMode::kCsv) return Oracle(CsvOracle::load(cfg.csv_path));
    return Oracle(SurrogateOracle(cfg.surrogate));
  }

  GroundTruth evaluate(const Design& d) const {
    return std::visit([&](const auto& o) { return o.evaluate(d); }, impl_);
  }

  // The table behind a CSV oracle, or null for the surrogate.
  const CsvOracle* csv_table() const { return std::get_if<CsvOracle>(&impl_); }

 private:
  std::variant<SurrogateOracle, CsvOracle> impl_;
};

enum class Split : std::uint8_t { kNone, kTrain, kValidation, kTest };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "val";
    case Split::kTest: return "test";
    case Split::kNone: break;
  }
  return "none";
}

struct LabeledDataset {
  std::vector<LabeledDesign> rows;
  std::vector<Split> splits;  // empty, or one entry per row
  std::size_t dropped = 0;    // rows removed by the floor filter
  double floor = 0.0;

  std::size_t size() const { return rows.size(); }
  std::size_t interesting_count() const {
    return static_cast<std::size_t>(
        std::count_if(rows.begin(), rows.end(), [](const LabeledDesign& r) { return r.interesting; }));
  }
};

// Evaluates and labels every design, dropping those with cl_fund < floor.
inline LabeledDataset build_dataset(std::span<const Design> designs, const Oracle& oracle, double floor) {
  LabeledDataset ds;
  ds.floor = floor;
  ds.rows.reserve(designs.size());
  for (const Design& d : designs) {
    const GroundTruth t = oracle.evaluate(d);
    if (t.cl_fund < floor) {
      ++ds.dropped;
      continue;
    }
    ds.rows.push_back(label(d, t));
  }
  return ds;
}

// Uniform sample of n rows without replacement; rows keep their original order.
inline LabeledDataset subsample(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size())
    throw InvalidArgument("subsample size " + std::to_string(n) + " exceeds data set size " +
                          std::to_string(ds.size()));
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> picked;
  picked.reserve(n);
  std::mt19937_64 gen(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), n, gen);
  LabeledDataset out;
  out.floor = ds.floor;
  out.rows.reserve(n);
  for (std::size_t i : picked) out.rows.push_back(ds.rows[i]);
  return out;
}

struct Partition {
  std::vector<std::size_t> train, validation, test;
};

// Random 80/10/10 split: floor(0.8n) / floor(0.1n) / remainder.
inline Partition partition(std::size_t n, std::uint64_t seed) {
  if (n < 10) throw InvalidArgument("data set too small to partition (need at least 10 rows, have " +
                                    std::to_string(n) + ")");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 gen(seed);
  std::shuffle(idx.begin(), idx.end(), gen);
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  Partition p;
  p.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  p.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                      idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  p.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return p;
}

inline Partition partition(const LabeledDataset& ds, std::uint64_t seed) { return partition(ds.size(), seed); }

inline void assign_splits(LabeledDataset& ds, const Partition& p) {
  ds.splits.assign(ds.size(), Split::kNone);
  for (auto i : p.train) ds.splits[i] = Split::kTrain;
  for (auto i : p.validation) ds.splits[i] = Split::kValidation;
  for (auto i : p.test) ds.splits[i] = Split::kTest;
}

// ---- file schemas ----------------------------------------------------------

inline const std::vector<std::string>& design_columns() {
  static const std::vector<std::string> cols{"d_core", "d_cap", "alpha", "d_nest", "d_clad", "gap"};
  return cols;
}

inline const std::vector<std::string>& dataset_columns() {
  static const std::vector<std::string> cols{"d_core",       "d_cap",        "alpha", "d_nest",      "d_clad",   "gap",
                                             "cl_fund_db_km", "cl_ho1_db_km", "sr_db", "interesting", "partition"};
  return cols;
}

inline std::string design_csv_fields(const Design& d, const DerivedGeometry& g) {
  return csv::num(d.d_core) + "," + csv::num(d.d_cap) + "," + csv::num(d.alpha) + "," + csv::num(d.d_nest) + "," +
         csv::num(g.d_clad) + "," + csv::num(g.gap);
}

inline std::string format_designs_csv(std::span<const Design> designs) {
  std::string out = "d_core,d_cap,alpha,d_nest,d_clad,gap\n";
  for (const auto& d : designs) out += design_csv_fields(d, derive_geometry(d)) + "\n";
  return out;
}

inline std::vector<Design> read_designs_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path, design_columns());
  std::vector<Design> out;
  out.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = path.string() + " row " + std::to_string(i + 2);
    const auto& r = t.rows[i];
    out.push_back({csv::parse_double(r[0], where), csv::parse_double(r[1], where), csv::parse_double(r[2], where),
                   csv::parse_double(r[3], where)});
  }
  return out;
}

inline std::string format_dataset_csv(const LabeledDataset& ds) {
  std::string out;
  for (std::size_t i = 0; i < dataset_columns().size(); ++i) out += (i ? "," : "") + dataset_columns()[i];
  out += "\n";
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    const auto& r = ds.rows[i];
    const Split s = ds.splits.empty() ? Split::kNone : ds.splits[i];
    out += design_csv_fields(r.design, r.geom) + "," + csv::num(r.truth.cl_fund) + "," + csv::num(r.truth.cl_ho1) +
           "," + csv::num(r.truth.sr) + "," + (r.interesting ? "1" : "0") + "," + std::string(to_string(s)) + "\n";
  }
  return out;
}

// Geometry, suppression ratio and the interesting label are re-derived from
// the stored design and losses, so a reloaded data set obeys every invariant.
inline LabeledDataset read_dataset_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path, dataset_columns());
  LabeledDataset ds;
  bool any_split = false;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = path.string() + " row " + std::to_string(i + 2);
    const auto& r = t.rows[i];
    const Design d{csv::parse_double(r[0], where), csv::parse_double(r[1], where), csv::parse_double(r[2], where),
                   csv::parse_double(r[3], where)};
    const double cl = csv::parse_double(r[6], where), ho = csv::parse_double(r[7], where);
    if (!(cl > 0.0) || !(ho > 0.0)) throw CorruptFile(where + ": losses must be positive");
    ds.rows.push_back(label(d, GroundTruth::from_losses(cl, ho)));
    const std::string& s = r[10];
    Split split = Split::kNone;
    if (s == "train") split = Split::kTrain;
    else if (s == "val") split = Split::kValidation;
    else if (s == "test") split = Split::kTest;
    else if (s != "none") throw CorruptFile(where + ": unknown partition '" + s + "'");
    any_split = any_split || split != Split::kNone;
    ds.splits.push_back(split);
  }
  if (!any_split) ds.splits.clear();
  return ds;
}

}  // namespace nanfml
