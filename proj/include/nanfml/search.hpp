#pragma once

// Dense design-space search with a trained two-stage model: stream sampled
// designs through classifier and regressor, keep the K lowest predicted
// losses and a histogram of all of them, then confirm the best k with the
// oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/geometry.hpp"
#include "nanfml/nn.hpp"
#include "nanfml/oracle.hpp"
#include "nanfml/pipeline.hpp"

namespace nanfml {

struct RankedDesign {
  double cl_p = 0.0;        // predicted loss, dB/km
  Design design;
  std::uint64_t index = 0;  // position in the sampled stream

  // Loss first, then the design tuple, then stream position.
  friend bool operator<(const RankedDesign& a, const RankedDesign& b) {
    return std::tie(a.cl_p, a.design, a.index) < std::tie(b.cl_p, b.design, b.index);
  }
  friend bool operator==(const RankedDesign&, const RankedDesign&) = default;
};

// Keeps the `capacity` smallest entries seen.
class TopKPool {
 public:
  explicit TopKPool(std::size_t capacity = 0) : capacity_(capacity) { heap_.reserve(capacity); }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return heap_.size(); }

  void offer(const RankedDesign& r) {
    if (capacity_ == 0) return;
    if (heap_.size() < capacity_) {
      heap_.push_back(r);
      std::push_heap(heap_.begin(), heap_.end());
    } else if (r < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = r;
      std::push_heap(heap_.begin(), heap_.end());
    }
  }

  void merge(const TopKPool& other) {
    for (const auto& r : other.heap_) offer(r);
  }

  std::vector<RankedDesign> sorted() const {
    std::vector<RankedDesign> out = heap_;
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<RankedDesign> heap_;  // max-heap
};

// Log10-spaced bins over [10^lo, 10^hi] dB/km plus an underflow and an
// overflow bin, so every accepted design is counted exactly once.
class LossHistogram {
 public:
  LossHistogram(int lo_decade = -3, int hi_decade = 6, int bins_per_decade = 20)
      : lo_(lo_decade), hi_(hi_decade), per_decade_(bins_per_decade),
        counts_(static_cast<std::size_t>((hi_decade - lo_decade) * bins_per_decade) + 2, 0) {}

  void add(double cl) {
    const double pos = (std::log10(cl) - lo_) * per_decade_;
    std::size_t bin;
    if (!(pos >= 0.0)) bin = 0;
    else if (pos >= static_cast<double>(counts_.size() - 2)) bin = counts_.size() - 1;
    else bin = static_cast<std::size_t>(pos) + 1;
    ++counts_[bin];
  }

  void merge(const LossHistogram& o) {
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  // Bin i spans [low(i), high(i)); bin 0 starts at 0 and the last bin is open.
  double low(std::size_t i) const {
    if (i == 0) return 0.0;
    return std::pow(10.0, lo_ + static_cast<double>(i - 1) / per_decade_);
  }
  double high(std::size_t i) const {
    if (i + 1 == counts_.size()) return std::numeric_limits<double>::infinity();
    return std::pow(10.0, lo_ + static_cast<double>(i) / per_decade_);
  }

  const std::vector<std::uint64_t>& counts() const { return counts_; }
  bool operator==(const LossHistogram&) const = default;

  std::string to_csv() const {
    std::string out = "bin_low,bin_high,count\n";
    for (std::size_t i = 0; i < counts_.size(); ++i)
      out += csv::num(low(i)) + "," + csv::num(high(i)) + "," + std::to_string(counts_[i]) + "\n";
    return out;
  }

 private:
  int lo_, hi_, per_decade_;
  std::vector<std::uint64_t> counts_;
};

struct ScanOptions {
  std::size_t n_target = 1000000;
  std::uint64_t seed = 0;
  std::size_t pool_size = 10000;
  std::size_t threads = 1;
  std::size_t pairs_per_block = 512;
  bool keep_predictions = true;  // needed by subset_study
};

struct SearchResult {
  std::vector<RankedDesign> pool;  // ascending
  LossHistogram histogram;
  std::uint64_t evaluated = 0;     // valid designs sampled (N)
  std::uint64_t accepted = 0;      // designs the classifier accepted
  std::uint64_t seed = 0;
  // Predicted loss of every accepted design in stream order.
  std::vector<double> predictions;
};

namespace detail {

struct ScanPartial {
  TopKPool pool;
  LossHistogram histogram;
  std::vector<double> predictions;
  std::uint64_t accepted = 0;
};

inline void scan_range(const TwoStageModel& model, std::span<const Design> designs, std::uint64_t first_index,
                       ScanPartial& out) {
  constexpr std::size_t kChunk = 4096;
  std::vector<nn::FeatureVector> xs, accepted_xs;
  std::vector<std::size_t> accepted_pos;
  std::vector<double> scores, y;
  for (std::size_t start = 0; start < designs.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, designs.size() - start);
    xs.resize(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = nn::featurize(designs[start + i]);
    scores.resize(n);
    nn::predict_into(model.classifier, xs, scores);
    accepted_xs.clear();
    accepted_pos.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (scores[i] >= model.threshold) {
        accepted_xs.push_back(xs[i]);
        accepted_pos.push_back(start + i);
      }
    y.resize(accepted_xs.size());
    nn::predict_into(model.regressor, accepted_xs, y);
    for (std::size_t k = 0; k < accepted_xs.size(); ++k) {
      const double cl = std::pow(10.0, y[k]);
      const std::size_t pos = accepted_pos[k];
      out.pool.offer({cl, designs[pos], first_index + pos});
      out.histogram.add(cl);
      out.predictions.push_back(cl);
    }
    out.accepted += accepted_xs.size();
  }
}

}  // namespace detail

// Samples opt.n_target valid designs and ranks the classifier-accepted ones
// by predicted loss. Work is split over contiguous index ranges; the result
// does not depend on opt.threads.
inline SearchResult scan(const TwoStageModel& model, const DesignSpaceSpec& spec, const ScanOptions& opt) {
  SearchResult result;
  result.seed = opt.seed;
  TopKPool pool(opt.pool_size);
  const std::size_t threads = std::max<std::size_t>(1, opt.threads);
  std::uint64_t offset = 0;
  sample_search_space_blocks(spec, opt.n_target, opt.seed, opt.pairs_per_block, [&](const std::vector<Design>& block) {
    const std::size_t parts = std::min(threads, std::max<std::size_t>(1, block.size()));
    std::vector<detail::ScanPartial> partial(parts, detail::ScanPartial{TopKPool(opt.pool_size), {}, {}, 0});
    const std::size_t per = (block.size() + parts - 1) / parts;
    auto run = [&](std::size_t p) {
      const std::size_t lo = std::min(block.size(), p * per), hi = std::min(block.size(), lo + per);
      detail::scan_range(model, std::span<const Design>(block).subspan(lo, hi - lo), offset + lo, partial[p]);
    };
    if (parts == 1) {
      run(0);
    } else {
      std::vector<std::jthread> pool_threads;
      for (std::size_t p = 0; p < parts; ++p) pool_threads.emplace_back(run, p);
    }
    for (auto& part : partial) {
      pool.merge(part.pool);
      result.histogram.merge(part.histogram);
      result.accepted += part.accepted;
      if (opt.keep_predictions)
        result.predictions.insert(result.predictions.end(), part.predictions.begin(), part.predictions.end());
    }
    offset += block.size();
  });
  result.evaluated = offset;
  result.pool = pool.sorted();
  return result;
}

// ---- confirmation ------------------------------------------------------------

struct ConfirmedDesign {
  Design design;
  double cl_p = 0.0;
  double cl_t = 0.0;
  double sr_t = 0.0;
};

struct ConfirmationReport {
  std::vector<ConfirmedDesign> rows;  // pool order
  double min_cl_t = 0.0;
  std::optional<double> std_cl_p, std_cl_t;
  std::vector<double> delta_cl_p, delta_cl_t;
};

inline double design_distance(const Design& a, const Design& b) {
  const auto sq = [](double x) { return x * x; };
  return std::sqrt(sq(a.d_core - b.d_core) + sq(a.d_cap - b.d_cap) + sq(a.alpha - b.alpha) + sq(a.d_nest - b.d_nest));
}

// Confirms the k lowest-predicted designs. With min_distance > 0, a pool
// entry closer than that to an already chosen design is skipped.
inline ConfirmationReport confirm_top_k(const SearchResult& result, const Oracle& oracle, std::size_t k = 18,
                                        double min_distance = 0.0) {
  if (k == 0) throw InvalidArgument("k must be positive");
  std::vector<const RankedDesign*> chosen;
  for (const auto& r : result.pool) {
    if (chosen.size() == k) break;
    const bool too_close = min_distance > 0.0 && std::any_of(chosen.begin(), chosen.end(), [&](const auto* c) {
                             return design_distance(c->design, r.design) < min_distance;
                           });
    if (!too_close) chosen.push_back(&r);
  }
  if (chosen.size() < k)
    throw InvalidArgument("search pool holds " + std::to_string(chosen.size()) + " eligible designs, fewer than k = " +
                          std::to_string(k));
  ConfirmationReport rep;
  std::vector<double> cl_p, cl_t;
  for (const auto* r : chosen) {
    const GroundTruth t = oracle.evaluate(r->design);
    rep.rows.push_back({r->design, r->cl_p, t.cl_fund, t.sr});
    cl_p.push_back(r->cl_p);
    cl_t.push_back(t.cl_fund);
  }
  rep.min_cl_t = *std::min_element(cl_t.begin(), cl_t.end());
  if (k >= 2) {
    rep.std_cl_p = std_best_k(cl_p);
    rep.std_cl_t = std_best_k(cl_t);
  }
  rep.delta_cl_p = delta_cl(cl_p);
  rep.delta_cl_t = delta_cl(cl_t);
  return rep;
}

// ---- subset study ------------------------------------------------------------

struct SubsetPoint {
  std::size_t m = 0;
  double mean_best = 0.0;  // average over repeats of the minimum predicted loss
  double std_best = 0.0;
};

// For each repeat, one random permutation of the accepted designs is drawn
// and the subset of size m is its first m entries, so subsets are nested
// across m within a repeat. At m equal to the number of accepted designs the
// minimum is the scan minimum exactly.
inline std::vector<SubsetPoint> subset_study(const SearchResult& result, std::vector<std::size_t> sizes,
                                             std::size_t repeats = 50, std::uint64_t seed = 0) {
  const std::size_t population = result.predictions.size();
  if (population != result.accepted)
    throw InvalidArgument("subset study needs the per-design predictions retained by the scan");
  if (repeats == 0) throw InvalidArgument("repeats must be positive");
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  for (auto m : sizes)
    if (m == 0 || m > population)
      throw InvalidArgument("subset size " + std::to_string(m) + " outside [1, " + std::to_string(population) + "]");
  if (sizes.empty()) return {};
  const std::size_t largest = sizes.back();
  std::vector<std::vector<double>> minima(sizes.size());
  std::vector<std::uint32_t> perm(population);
  std::mt19937_64 gen(seed);
  for (std::size_t r = 0; r < repeats; ++r) {
    for (std::size_t i = 0; i < population; ++i) perm[i] = static_cast<std::uint32_t>(i);
    double best = std::numeric_limits<double>::infinity();
    std::size_t next = 0;
    for (std::size_t i = 0; i < largest; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, population - 1);
      std::swap(perm[i], perm[pick(gen)]);
      best = std::min(best, result.predictions[perm[i]]);
      while (next < sizes.size() && sizes[next] == i + 1) minima[next++].push_back(best);
    }
  }
  std::vector<SubsetPoint> out;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    SubsetPoint p;
    p.m = sizes[s];
    p.mean_best = mean(minima[s]);
    p.std_best = minima[s].size() >= 2 ? std_best_k(minima[s]) : 0.0;
    out.push_back(p);
  }
  return out;
}

// ---- multi-realization study -------------------------------------------------

struct RealizationTrial {
  std::size_t trial = 0;
  TrialSeeds seeds;
  double best_cl_p = 0.0;  // cl_p(D_1)
  double best_cl_t = 0.0;  // cl_t(D_1)
  ConfirmationReport confirmation;
};

struct RealizationReport {
  std::vector<RealizationTrial> trials;  // ascending best_cl_p
  std::vector<double> pooled_delta_p, pooled_delta_t;
  double spread_cl_p = 0.0, spread_cl_t = 0.0;  // max - min over trials
};

struct RealizationOptions {
  std::size_t n = 1819;
  std::size_t repeats = 20;
  std::size_t k = 18;
  std::uint64_t seed = 0;
  TwoStageOptions two_stage;
  ScanOptions scan;
  DesignSpaceSpec search_space = search_space_spec();
};

// Independent two-stage models on distinct random subsets of size n, each
// followed by a scan and top-k confirmation.
inline RealizationReport realization_study(const LabeledDataset& master, const Oracle& oracle,
                                           const RealizationOptions& opt) {
  if (opt.n > master.size())
    throw InvalidArgument("realization size " + std::to_string(opt.n) + " exceeds master data set size " +
                          std::to_string(master.size()));
  RealizationReport rep;
  for (std::size_t t = 0; t < opt.repeats; ++t) {
    const TrialSeeds seeds = trial_seeds(opt.seed, opt.n, master.size() + 1, t);
    LabeledDataset subset = subsample(master, opt.n, seeds.subset);
    const Partition part = partition(subset, seeds.partition);
    TwoStageOptions two = opt.two_stage;
    two.classifier.seed = seeds.init;
    const TwoStageTraining trained = train_two_stage(subset, part, two);
    ScanOptions sopt = opt.scan;
    sopt.keep_predictions = false;
    const SearchResult sr = scan(trained.model, opt.search_space, sopt);
    RealizationTrial rt;
    rt.trial = t;
    rt.seeds = seeds;
    rt.confirmation = confirm_top_k(sr, oracle, opt.k);
    rt.best_cl_p = rt.confirmation.rows.front().cl_p;
    rt.best_cl_t = rt.confirmation.rows.front().cl_t;
    rep.pooled_delta_p.insert(rep.pooled_delta_p.end(), rt.confirmation.delta_cl_p.begin(),
                              rt.confirmation.delta_cl_p.end());
    rep.pooled_delta_t.insert(rep.pooled_delta_t.end(), rt.confirmation.delta_cl_t.begin(),
                              rt.confirmation.delta_cl_t.end());
    rep.trials.push_back(std::move(rt));
  }
  std::stable_sort(rep.trials.begin(), rep.trials.end(),
                   [](const auto& a, const auto& b) { return a.best_cl_p < b.best_cl_p; });
  if (!rep.trials.empty()) {
    const auto [pmin, pmax] = std::minmax_element(rep.trials.begin(), rep.trials.end(),
                                                  [](const auto& a, const auto& b) { return a.best_cl_p < b.best_cl_p; });
    const auto [tmin, tmax] = std::minmax_element(rep.trials.begin(), rep.trials.end(),
                                                  [](const auto& a, const auto& b) { return a.best_cl_t < b.best_cl_t; });
    rep.spread_cl_p = pmax->best_cl_p - pmin->best_cl_p;
    rep.spread_cl_t = tmax->best_cl_t - tmin->best_cl_t;
  }
  return rep;
}

// ---- files ---------------------------------------------------------------------

inline std::string pool_csv(std::span<const RankedDesign> pool) {
  std::string out = "rank,d_core,d_cap,alpha,d_nest,d_clad,gap,cl_p_db_km,sample_index\n";
  for (std::size_t i = 0; i < pool.size(); ++i)
    out += std::to_string(i + 1) + "," + design_csv_fields(pool[i].design, derive_geometry(pool[i].design)) + "," +
           csv::num(pool[i].cl_p) + "," + std::to_string(pool[i].index) + "\n";
  return out;
}

inline std::vector<RankedDesign> read_pool_csv(const std::filesystem::path& path) {
  const csv::Table t =
      csv::read(path, {"rank", "d_core", "d_cap", "alpha", "d_nest", "d_clad", "gap", "cl_p_db_km", "sample_index"});
  std::vector<RankedDesign> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = path.string() + " row " + std::to_string(i + 2);
    const auto& r = t.rows[i];
    RankedDesign d;
    d.design = {csv::parse_double(r[1], where), csv::parse_double(r[2], where), csv::parse_double(r[3], where),
                csv::parse_double(r[4], where)};
    d.cl_p = csv::parse_double(r[7], where);
    d.index = static_cast<std::uint64_t>(csv::parse_double(r[8], where));
    out.push_back(d);
  }
  return out;
}

inline std::string confirmation_csv(const ConfirmationReport& rep) {
  std::string out = "rank,d_core,d_cap,alpha,d_nest,d_clad,gap,cl_p_db_km,cl_t_db_km,sr_t_db,delta_cl_p,delta_cl_t\n";
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    const auto& r = rep.rows[i];
    out += std::to_string(i + 1) + "," + design_csv_fields(r.design, derive_geometry(r.design)) + "," +
           csv::num(r.cl_p) + "," + csv::num(r.cl_t) + "," + csv::num(r.sr_t) + "," + csv::num(rep.delta_cl_p[i]) +
           "," + csv::num(rep.delta_cl_t[i]) + "\n";
  }
  return out;
}

inline std::string confirmation_stats(const ConfirmationReport& rep) {
  std::string out = "key,value\n";
  out += "k," + std::to_string(rep.rows.size()) + "\n";
  out += "best_cl_p," + csv::num(rep.rows.front().cl_p) + "\n";
  out += "best_cl_t," + csv::num(rep.rows.front().cl_t) + "\n";
  out += "min_cl_t," + csv::num(rep.min_cl_t) + "\n";
  out += "std_cl_p," + opt_num(rep.std_cl_p) + "\n";
  out += "std_cl_t," + opt_num(rep.std_cl_t) + "\n";
  return out;
}

inline std::string subset_csv(std::span<const SubsetPoint> pts) {
  std::string out = "m,mean_best_cl_p,std_best_cl_p\n";
  for (const auto& p : pts) out += std::to_string(p.m) + "," + csv::num(p.mean_best) + "," + csv::num(p.std_best) + "\n";
  return out;
}

inline std::string realization_csv(const RealizationReport& rep) {
  std::string out = "order,trial,subset_seed,partition_seed,init_seed,best_cl_p,best_cl_t,min_cl_t\n";
  for (std::size_t i = 0; i < rep.trials.size(); ++i) {
    const auto& t = rep.trials[i];
    out += std::to_string(i + 1) + "," + std::to_string(t.trial) + "," + std::to_string(t.seeds.subset) + "," +
           std::to_string(t.seeds.partition) + "," + std::to_string(t.seeds.init) + "," + csv::num(t.best_cl_p) +
           "," + csv::num(t.best_cl_t) + "," + csv::num(t.confirmation.min_cl_t) + "\n";
  }
  return out;
}

// Stream-order predictions as raw little-endian doubles after a small header.
inline constexpr std::array<char, 8> kPredictionsMagic{'N', 'A', 'N', 'F', 'P', 'R', 'D', '1'};

inline void save_predictions(std::span<const double> preds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(kPredictionsMagic.data(), kPredictionsMagic.size());
  const std::uint64_t n = preds.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(preds.data()), static_cast<std::streamsize>(preds.size() * sizeof(double)));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::vector<double> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || magic != kPredictionsMagic) throw CorruptFile("'" + path.string() + "' is not a predictions file");
  const auto expected = std::filesystem::file_size(path);
  if (expected != magic.size() + sizeof(n) + n * sizeof(double))
    throw CorruptFile("'" + path.string() + "' has the wrong size for " + std::to_string(n) + " predictions");
  std::vector<double> out(n);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw CorruptFile("'" + path.string() + "' is truncated");
  return out;
}

}  // namespace nanfml
