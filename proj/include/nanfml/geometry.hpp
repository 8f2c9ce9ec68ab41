#pragma once

// NANF cross-section geometry: four free parameters, the dimensions derived
// from them, the validity rules that carve out the design space, and grid /
// random enumeration of that space.

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nanfml/error.hpp"

namespace nanfml {

// Capillary wall thickness in um; every "2.22" below is 2 * kWallThickness.
inline constexpr double kWallThickness = 1.11;

struct Design {
  double d_core = 0.0;  // um
  double d_cap = 0.0;   // um
  double alpha = 0.0;   // embedded fraction of the main capillary, [0, 0.5]
  double d_nest = 0.0;  // um

  friend auto operator<=>(const Design&, const Design&) = default;
  friend bool operator==(const Design&, const Design&) = default;
};

inline bool has_valid_fields(const Design& d) {
  return d.d_core > 0.0 && d.d_cap > 0.0 && d.d_nest > 0.0 && d.alpha >= 0.0 && d.alpha <= 0.5;
}

struct DerivedGeometry {
  double d_clad = 0.0;
  double gap = 0.0;
  double air_space = 0.0;
  double nest_ratio = 0.0;  // d_nest / ((1 - alpha) d_cap)
};

inline DerivedGeometry derive_geometry(const Design& d) {
  const double s = std::sin(std::numbers::pi / 4.0);
  const double cap_outer = d.d_cap + 2.0 * kWallThickness;
  const double exposed_cap = (1.0 - d.alpha) * d.d_cap;
  DerivedGeometry g;
  g.d_clad = d.d_core + 2.0 * (1.0 - d.alpha) * cap_outer;
  g.gap = s * d.d_core + (s - 1.0) * cap_outer;
  g.air_space = exposed_cap - d.d_nest - kWallThickness * (1.0 + 2.0 * d.alpha);
  g.nest_ratio = d.d_nest / exposed_cap;
  return g;
}

// Closed range sampled either on a uniform grid (min + i * step) or, for the
// search space core/capillary diameters, uniformly at random in [min, max].
struct Range {
  double min = 0.0;
  double max = 0.0;
  double step = 0.0;  // 0 means "continuous"

  std::size_t count() const {
    if (step <= 0.0) return 0;
    return static_cast<std::size_t>(std::floor((max - min) / step + 1e-9)) + 1;
  }
  double at(std::size_t i) const { return min + static_cast<double>(i) * step; }
};

struct DesignSpaceSpec {
  Range d_core{20.0, 60.0, 1.0};
  Range d_cap{25.8, 54.3, 0.5};
  Range alpha{0.0, 0.5, 0.05};
  // d_nest = fraction * (1 - alpha) * d_cap
  Range nest_fraction{0.1, 0.6, 0.05};
  double gap_min = 3.0;
  double gap_max = 6.0;
  double gap_tolerance = 0.1;
  double nest_fraction_floor = 0.1;

  // Throws InvalidArgument when a range is inverted or a grid step is not positive.
  void check(bool require_core_cap_steps) const;
};

// Grid used to build the training data set.
inline DesignSpaceSpec dataset_grid_spec() { return DesignSpaceSpec{}; }

// Dense search space: continuous core/capillary diameters crossed with a fine
// (alpha, nest fraction) grid.
inline DesignSpaceSpec search_space_spec() {
  DesignSpaceSpec s;
  s.d_core = {20.0, 31.0, 0.0};
  s.d_cap = {25.8, 54.3, 0.0};
  s.alpha = {0.0, 0.5, 0.02};
  s.nest_fraction = {0.1, 0.6, 0.02};
  return s;
}

inline void DesignSpaceSpec::check(bool require_core_cap_steps) const {
  auto check_range = [](const Range& r, std::string_view name, bool need_step) {
    if (!(r.min <= r.max)) throw InvalidArgument(std::string(name) + ": min > max");
    if (need_step && !(r.step > 0.0)) throw InvalidArgument(std::string(name) + ": step must be > 0");
    if (r.step < 0.0) throw InvalidArgument(std::string(name) + ": negative step");
  };
  check_range(d_core, "d_core", require_core_cap_steps);
  check_range(d_cap, "d_cap", require_core_cap_steps);
  check_range(alpha, "alpha", true);
  check_range(nest_fraction, "nest_fraction", true);
  if (!(gap_min <= gap_max)) throw InvalidArgument("gap_min > gap_max");
  if (gap_tolerance < 0.0) throw InvalidArgument("gap_tolerance < 0");
}

enum class Rejection : std::uint8_t {
  kNone = 0,
  kNestVsCore,        // d_nest <= (1 - alpha) d_cap - d_core
  kNestTooSmall,      // d_nest <= f_min (1 - alpha) d_cap
  kGapOutOfRange,     // gap < g_min or gap > g_max + tolerance
  kNestTouchesCapillary,  // air space <= 0
};

inline std::string_view to_string(Rejection r) {
  switch (r) {
    case Rejection::kNone: return "accepted";
    case Rejection::kNestVsCore: return "nest-vs-core";
    case Rejection::kNestTooSmall: return "nest-too-small";
    case Rejection::kGapOutOfRange: return "gap-out-of-range";
    case Rejection::kNestTouchesCapillary: return "nest-touches-capillary";
  }
  return "unknown";
}

struct Verdict {
  Rejection reason = Rejection::kNone;
  bool accepted() const { return reason == Rejection::kNone; }
};

// Rules are checked in a fixed order; the verdict names the first failing one.
inline Verdict validate(const Design& d, const DerivedGeometry& g, const DesignSpaceSpec& spec) {
  const double exposed_cap = (1.0 - d.alpha) * d.d_cap;
  if (d.d_nest <= exposed_cap - d.d_core) return {Rejection::kNestVsCore};
  if (d.d_nest <= spec.nest_fraction_floor * exposed_cap) return {Rejection::kNestTooSmall};
  if (g.gap < spec.gap_min || g.gap > spec.gap_max + spec.gap_tolerance) return {Rejection::kGapOutOfRange};
  if (g.air_space <= 0.0) return {Rejection::kNestTouchesCapillary};
  return {};
}

inline Verdict validate(const Design& d, const DesignSpaceSpec& spec) {
  return validate(d, derive_geometry(d), spec);
}

inline Design design_from_fraction(double d_core, double d_cap, double alpha, double fraction) {
  return {d_core, d_cap, alpha, fraction * ((1.0 - alpha) * d_cap)};
}

// Visits every valid grid design in lexicographic (d_core, d_cap, alpha,
// fraction) order.
template <class Visitor>
void for_each_grid_design(const DesignSpaceSpec& spec, Visitor&& visit) {
  spec.check(true);
  const std::size_t nc = spec.d_core.count(), np = spec.d_cap.count();
  const std::size_t na = spec.alpha.count(), nf = spec.nest_fraction.count();
  for (std::size_t ic = 0; ic < nc; ++ic)
    for (std::size_t ip = 0; ip < np; ++ip)
      for (std::size_t ia = 0; ia < na; ++ia)
        for (std::size_t jf = 0; jf < nf; ++jf) {
          const Design d = design_from_fraction(spec.d_core.at(ic), spec.d_cap.at(ip), spec.alpha.at(ia),
                                                spec.nest_fraction.at(jf));
          if (validate(d, spec).accepted()) visit(d);
        }
}

inline std::vector<Design> enumerate_grid(const DesignSpaceSpec& spec) {
  std::vector<Design> out;
  for_each_grid_design(spec, [&](const Design& d) { out.push_back(d); });
  return out;
}

// Random search-space sampler. Pair i of the (d_core, d_cap) stream depends
// only on (seed, i), so any stretch of the stream can be regenerated.
class SearchSampler {
 public:
  SearchSampler(const DesignSpaceSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    spec_.check(false);
    for (std::size_t ia = 0; ia < spec_.alpha.count(); ++ia)
      for (std::size_t jf = 0; jf < spec_.nest_fraction.count(); ++jf)
        grid_.push_back({spec_.alpha.at(ia), spec_.nest_fraction.at(jf)});
  }

  const DesignSpaceSpec& spec() const { return spec_; }
  std::size_t candidates_per_pair() const { return grid_.size(); }

  std::pair<double, double> core_cap_pair(std::uint64_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 gen(seq);
    std::uniform_real_distribution<double> core(spec_.d_core.min, spec_.d_core.max);
    std::uniform_real_distribution<double> cap(spec_.d_cap.min, spec_.d_cap.max);
    const double c = core(gen);
    return {c, cap(gen)};
  }

  // Appends the valid designs of pair `index` in (alpha, fraction) order.
  std::size_t append_pair_designs(std::uint64_t index, std::vector<Design>& out) const {
    const auto [core, cap] = core_cap_pair(index);
    std::size_t added = 0;
    for (const auto& [alpha, fraction] : grid_) {
      const Design d = design_from_fraction(core, cap, alpha, fraction);
      if (validate(d, spec_).accepted()) {
        out.push_back(d);
        ++added;
      }
    }
    return added;
  }

 private:
  DesignSpaceSpec spec_;
  std::uint64_t seed_;
  std::vector<std::pair<double, double>> grid_;
};

inline constexpr double kMinSearchAcceptance = 1e-4;
inline constexpr std::size_t kAcceptanceProbeCandidates = 100000;

// Streams valid search designs in blocks of whole pairs to `sink(block)`,
// truncating the final block so exactly n_target designs are emitted.
// Throws InvalidArgument when the acceptance rate falls below 1e-4.
template <class BlockSink>
std::size_t sample_search_space_blocks(const DesignSpaceSpec& spec, std::size_t n_target, std::uint64_t seed,
                                       std::size_t pairs_per_block, BlockSink&& sink) {
  if (n_target == 0) return 0;
  const SearchSampler sampler(spec, seed);
  if (sampler.candidates_per_pair() == 0) throw InvalidArgument("search grid is empty");
  std::size_t produced = 0;
  std::uint64_t pair = 0;
  std::vector<Design> block;
  while (produced < n_target) {
    block.clear();
    for (std::size_t k = 0; k < pairs_per_block && produced + block.size() < n_target; ++k, ++pair)
      sampler.append_pair_designs(pair, block);
    if (produced + block.size() > n_target) block.resize(n_target - produced);
    produced += block.size();
    const double candidates = static_cast<double>(pair) * static_cast<double>(sampler.candidates_per_pair());
    if (candidates >= static_cast<double>(kAcceptanceProbeCandidates) &&
        static_cast<double>(produced) / candidates < kMinSearchAcceptance)
      throw InvalidArgument("search space acceptance rate below 1e-4 after " +
                            std::to_string(static_cast<std::uint64_t>(candidates)) +
                            " candidates; the space is likely infeasible");
    if (!block.empty()) sink(std::as_const(block));
  }
  return produced;
}

inline std::vector<Design> sample_search_space(const DesignSpaceSpec& spec, std::size_t n_target,
                                               std::uint64_t seed) {
  std::vector<Design> out;
  sample_search_space_blocks(spec, n_target, seed, 64,
                             [&](const std::vector<Design>& b) { out.insert(out.end(), b.begin(), b.end()); });
  return out;
}

}  // namespace nanfml
