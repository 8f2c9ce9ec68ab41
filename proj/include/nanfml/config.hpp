#pragma once

// Run configuration (flat key/value text with [section] headers), environment
// overrides, content hashes and per-command manifests.

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <charconv>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nanfml/csv.hpp"
#include "nanfml/error.hpp"
#include "nanfml/geometry.hpp"
#include "nanfml/nn.hpp"
#include "nanfml/oracle.hpp"
#include "nanfml/pipeline.hpp"
#include "nanfml/search.hpp"

namespace nanfml {

inline constexpr std::string_view kVersion = "1.0.0";

// ---- raw key/value file --------------------------------------------------------

// Keys are stored as "section.key". Lines starting with '#' or ';' are comments.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, const std::string& origin = "<config>") {
    ConfigFile cfg;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) throw InvalidArgument(where + ": malformed section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw InvalidArgument(where + ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw InvalidArgument(where + ": empty key");
      if (section.empty()) throw InvalidArgument(where + ": key '" + key + "' outside any section");
      cfg.values_[section + "." + key] = trim(t.substr(eq + 1));
    }
    return cfg;
  }

  static ConfigFile load(const std::filesystem::path& path) { return parse(csv::read_text(path), path.string()); }

  // Canonical form: sections and keys sorted, one "key = value" per line.
  std::string serialize() const {
    std::string out, current;
    for (const auto& [full, value] : values_) {
      const auto dot = full.find('.');
      const std::string section = full.substr(0, dot);
      if (section != current) {
        if (!out.empty()) out += "\n";
        out += "[" + section + "]\n";
        current = section;
      }
      out += full.substr(dot + 1) + " = " + value + "\n";
    }
    return out;
  }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }
  bool operator==(const ConfigFile&) const = default;

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

// ---- typed configuration -------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  OracleConfig oracle;
  double floor_db_km = 1.0;
  // With a CSV oracle, build the data set from the CSV's own designs (those
  // passing validation) instead of enumerating the grid.
  bool designs_from_csv = false;

  DesignSpaceSpec grid = dataset_grid_spec();
  DesignSpaceSpec search_space = search_space_spec();

  std::size_t train_n = 2000;
  double threshold = 0.5;
  RegressorFilter filter = RegressorFilter::kClassifier;
  nn::Hyperparams classifier = nn::classifier_hyperparams();
  std::string regressor_column = "auto";  // auto, regressor-1 or regressor-2
  std::optional<std::vector<std::size_t>> regressor_hidden;
  std::optional<double> regressor_learning_rate;
  std::optional<std::size_t> regressor_epochs;

  std::vector<std::size_t> study_sizes{1819, 3638, 5457, 7276, 9095, 18188};
  std::size_t study_trials = 10;
  std::size_t realizations = 0;
  std::size_t realization_n = 1819;

  std::size_t search_n = 1000000;
  std::size_t pool_size = 10000;
  std::size_t k = 18;
  double min_distance = 0.0;
  std::vector<std::size_t> subset_sizes{1000, 10000, 100000};  // the full accepted set is always added
  std::size_t subset_repeats = 50;

  // Regressor hyperparameters for a data set of n rows.
  nn::Hyperparams regressor_for(std::size_t n) const {
    nn::Hyperparams hp = regressor_column == "regressor-1"   ? nn::regressor1_hyperparams()
                         : regressor_column == "regressor-2" ? nn::regressor2_hyperparams()
                                                             : regressor_hyperparams_for(n).hp;
    if (regressor_hidden) hp.hidden = *regressor_hidden;
    if (regressor_learning_rate) hp.learning_rate = *regressor_learning_rate;
    if (regressor_epochs) hp.epochs = *regressor_epochs;
    return hp;
  }

  // Pins the regressor only when the config overrides the size rule.
  TwoStageOptions two_stage() const {
    TwoStageOptions o;
    o.classifier = classifier;
    o.threshold = threshold;
    o.filter = filter;
    if (regressor_column != "auto" || regressor_hidden || regressor_learning_rate || regressor_epochs)
      o.regressor = regressor_for(0);
    return o;
  }
};

namespace config_detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::string range_text(const Range& r) { return csv::num(r.min) + ":" + csv::num(r.step) + ":" + csv::num(r.max); }

inline Range parse_range(const std::string& key, const std::string& v) {
  const auto parts = csv::split(v, ':');
  if (parts.size() != 3) throw InvalidArgument(key + ": expected min:step:max, got '" + v + "'");
  return {csv::parse_double(parts[0], key), csv::parse_double(parts[2], key), csv::parse_double(parts[1], key)};
}

template <class T>
std::string list_text(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || p != end) throw InvalidArgument(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    return csv::parse_double(v, key);
  } catch (const CorruptFile&) {
    throw InvalidArgument(key + ": expected a number, got '" + v + "'");
  }
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  for (const auto& p : csv::split(v, ',')) {
    std::string t(p);
    t.erase(std::remove_if(t.begin(), t.end(), [](unsigned char c) { return std::isspace(c); }), t.end());
    out.push_back(static_cast<std::size_t>(parse_uint(key, t)));
  }
  return out;
}

inline void write_space(ConfigFile& f, const std::string& section, const DesignSpaceSpec& s) {
  f.set(section + ".d_core", range_text(s.d_core));
  f.set(section + ".d_cap", range_text(s.d_cap));
  f.set(section + ".alpha", range_text(s.alpha));
  f.set(section + ".nest_fraction", range_text(s.nest_fraction));
  f.set(section + ".gap_min", csv::num(s.gap_min));
  f.set(section + ".gap_max", csv::num(s.gap_max));
  f.set(section + ".gap_tolerance", csv::num(s.gap_tolerance));
  f.set(section + ".nest_fraction_floor", csv::num(s.nest_fraction_floor));
}

}  // namespace config_detail

// Every key the typed config understands, with its default value.
inline ConfigFile to_file(const RunConfig& c) {
  using namespace config_detail;
  ConfigFile f;
  f.set("run.seed", std::to_string(c.seed));
  f.set("run.threads", std::to_string(c.threads));
  f.set("oracle.mode", c.oracle.mode == OracleMode::kCsv ? "csv" : "surrogate");
  f.set("oracle.csv_path", c.oracle.csv_path.string());
  f.set("oracle.surrogate_intercept", csv::num(c.oracle.surrogate.intercept));
  f.set("oracle.floor_db_km", csv::num(c.floor_db_km));
  f.set("oracle.design_source", c.designs_from_csv ? "csv" : "grid");
  write_space(f, "grid", c.grid);
  write_space(f, "search_space", c.search_space);
  f.set("train.n", std::to_string(c.train_n));
  f.set("train.threshold", csv::num(c.threshold));
  f.set("train.regressor_filter", c.filter == RegressorFilter::kGroundTruth ? "ground_truth" : "classifier");
  f.set("classifier.hidden", list_text(c.classifier.hidden));
  f.set("classifier.learning_rate", csv::num(c.classifier.learning_rate));
  f.set("classifier.epochs", std::to_string(c.classifier.epochs));
  f.set("regressor.column", c.regressor_column);
  f.set("regressor.hidden", c.regressor_hidden ? list_text(*c.regressor_hidden) : "");
  f.set("regressor.learning_rate", c.regressor_learning_rate ? csv::num(*c.regressor_learning_rate) : "");
  f.set("regressor.epochs", c.regressor_epochs ? std::to_string(*c.regressor_epochs) : "");
  f.set("study.sizes", list_text(c.study_sizes));
  f.set("study.trials", std::to_string(c.study_trials));
  f.set("study.realizations", std::to_string(c.realizations));
  f.set("study.realization_n", std::to_string(c.realization_n));
  f.set("search.n", std::to_string(c.search_n));
  f.set("search.pool_size", std::to_string(c.pool_size));
  f.set("search.k", std::to_string(c.k));
  f.set("search.min_distance", csv::num(c.min_distance));
  f.set("search.subset_sizes", list_text(c.subset_sizes));
  f.set("search.subset_repeats", std::to_string(c.subset_repeats));
  return f;
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline RunConfig from_file(const ConfigFile& f) {
  using namespace config_detail;
  const ConfigFile known = to_file(RunConfig{});
  for (const auto& [key, value] : f.values())
    if (!known.get(key)) throw InvalidArgument("unknown config key '" + key + "'");
  RunConfig c;
  auto str = [&](const char* key) { return f.get(key); };
  auto uint = [&](const char* key, auto& dst) {
    if (auto v = str(key)) dst = static_cast<std::remove_reference_t<decltype(dst)>>(parse_uint(key, *v));
  };
  auto real = [&](const char* key, double& dst) {
    if (auto v = str(key)) dst = parse_real(key, *v);
  };
  auto space = [&](const std::string& section, DesignSpaceSpec& s) {
    for (auto [name, range] : {std::pair{"d_core", &s.d_core}, std::pair{"d_cap", &s.d_cap},
                               std::pair{"alpha", &s.alpha}, std::pair{"nest_fraction", &s.nest_fraction}})
      if (auto v = f.get(section + "." + name)) *range = parse_range(section + "." + name, *v);
    for (auto [name, dst] : {std::pair{"gap_min", &s.gap_min}, std::pair{"gap_max", &s.gap_max},
                             std::pair{"gap_tolerance", &s.gap_tolerance},
                             std::pair{"nest_fraction_floor", &s.nest_fraction_floor}})
      if (auto v = f.get(section + "." + name)) *dst = parse_real(section + "." + name, *v);
  };

  uint("run.seed", c.seed);
  uint("run.threads", c.threads);
  if (auto v = str("oracle.mode")) {
    const std::string m = lower(*v);
    if (m == "surrogate") c.oracle.mode = OracleMode::kSurrogate;
    else if (m == "csv") c.oracle.mode = OracleMode::kCsv;
    else throw InvalidArgument("oracle.mode: expected surrogate or csv, got '" + *v + "'");
  }
  if (auto v = str("oracle.csv_path")) c.oracle.csv_path = *v;
  real("oracle.surrogate_intercept", c.oracle.surrogate.intercept);
  real("oracle.floor_db_km", c.floor_db_km);
  if (auto v = str("oracle.design_source")) {
    if (*v == "grid") c.designs_from_csv = false;
    else if (*v == "csv") c.designs_from_csv = true;
    else throw InvalidArgument("oracle.design_source: expected grid or csv, got '" + *v + "'");
  }
  space("grid", c.grid);
  space("search_space", c.search_space);
  uint("train.n", c.train_n);
  real("train.threshold", c.threshold);
  if (auto v = str("train.regressor_filter")) {
    if (*v == "classifier") c.filter = RegressorFilter::kClassifier;
    else if (*v == "ground_truth") c.filter = RegressorFilter::kGroundTruth;
    else throw InvalidArgument("train.regressor_filter: expected classifier or ground_truth, got '" + *v + "'");
  }
  if (auto v = str("classifier.hidden")) c.classifier.hidden = parse_list("classifier.hidden", *v);
  real("classifier.learning_rate", c.classifier.learning_rate);
  uint("classifier.epochs", c.classifier.epochs);
  if (auto v = str("regressor.column")) {
    if (*v != "auto" && *v != "regressor-1" && *v != "regressor-2")
      throw InvalidArgument("regressor.column: expected auto, regressor-1 or regressor-2, got '" + *v + "'");
    c.regressor_column = *v;
  }
  if (auto v = str("regressor.hidden"); v && !v->empty()) c.regressor_hidden = parse_list("regressor.hidden", *v);
  if (auto v = str("regressor.learning_rate"); v && !v->empty())
    c.regressor_learning_rate = parse_real("regressor.learning_rate", *v);
  if (auto v = str("regressor.epochs"); v && !v->empty())
    c.regressor_epochs = static_cast<std::size_t>(parse_uint("regressor.epochs", *v));
  if (auto v = str("study.sizes")) c.study_sizes = parse_list("study.sizes", *v);
  uint("study.trials", c.study_trials);
  uint("study.realizations", c.realizations);
  uint("study.realization_n", c.realization_n);
  uint("search.n", c.search_n);
  uint("search.pool_size", c.pool_size);
  uint("search.k", c.k);
  real("search.min_distance", c.min_distance);
  if (auto v = str("search.subset_sizes")) c.subset_sizes = parse_list("search.subset_sizes", *v);
  uint("search.subset_repeats", c.subset_repeats);

  c.grid.check(true);
  c.search_space.check(false);
  c.classifier.check();
  if (c.threads == 0) throw InvalidArgument("run.threads must be >= 1");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw InvalidArgument("train.threshold must be in (0, 1)");
  if (c.oracle.mode == OracleMode::kCsv && c.oracle.csv_path.empty())
    throw InvalidArgument("oracle.mode = csv needs oracle.csv_path");
  if (c.designs_from_csv && c.oracle.mode != OracleMode::kCsv)
    throw InvalidArgument("oracle.design_source = csv needs oracle.mode = csv");
  return c;
}

// NANF_<SECTION>_<KEY> overrides the matching config key, e.g. NANF_SEARCH_N.
inline std::vector<std::string> apply_env_overrides(ConfigFile& f, const char* const* env = nullptr) {
  std::vector<std::string> applied;
  auto lookup = [&](const std::string& name) -> std::optional<std::string> {
    if (!env) {
      if (const char* v = std::getenv(name.c_str())) return std::string(v);
      return std::nullopt;
    }
    for (auto p = env; *p; ++p) {
      const std::string_view kv(*p);
      if (kv.size() > name.size() && kv.substr(0, name.size()) == name && kv[name.size()] == '=')
        return std::string(kv.substr(name.size() + 1));
    }
    return std::nullopt;
  };
  const ConfigFile known = to_file(RunConfig{});
  for (const auto& [key, value] : known.values()) {
    std::string name = "NANF_" + key;
    std::replace(name.begin(), name.end(), '.', '_');
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (auto v = lookup(name)) {
      f.set(key, *v);
      applied.push_back(name);
    }
  }
  return applied;
}

// Canonical text of the keys under the given sections ("run.seed" style
// entries select single keys). run.threads never changes an output and is
// always left out.
inline std::string config_identity(const RunConfig& c, std::span<const std::string_view> scopes = {}) {
  ConfigFile picked;
  const ConfigFile all = to_file(c);
  for (const auto& [key, value] : all.values()) {
    if (key == "run.threads") continue;
    const std::string_view section = std::string_view(key).substr(0, key.find('.'));
    const bool keep = scopes.empty() || std::any_of(scopes.begin(), scopes.end(), [&](std::string_view s) {
                        return s == section || s == key;
                      });
    if (keep) picked.set(key, value);
  }
  return picked.serialize();
}

// ---- hashing ---------------------------------------------------------------------

namespace config_detail {

inline std::string hex(const unsigned char* md, unsigned int len) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += digits[md[i] >> 4];
    out += digits[md[i] & 0xf];
  }
  return out;
}

}  // namespace config_detail

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  return config_detail::hex(md, len);
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  return config_detail::hex(md, len);
}

// ---- manifests ---------------------------------------------------------------------

// Written next to a command's outputs. Paths are relative to the output directory.
struct Manifest {
  std::string command;
  std::string config_sha256;  // whole effective config
  std::string stage_sha256;   // only the keys this command depends on
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path -> sha256
  std::map<std::string, std::string> extra;    // command-specific facts

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = std::string(kVersion);
    j["config_sha256"] = config_sha256;
    j["stage_sha256"] = stage_sha256;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["extra"] = extra;
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    try {
      m.command = j.at("command").get<std::string>();
      m.config_sha256 = j.at("config_sha256").get<std::string>();
      m.stage_sha256 = j.at("stage_sha256").get<std::string>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
      m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
      if (j.contains("extra")) m.extra = j.at("extra").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFile(std::string("malformed manifest: ") + e.what());
    }
    return m;
  }

  void save(const std::filesystem::path& path) const { csv::write_text(path, to_json().dump(2) + "\n"); }

  static Manifest load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(csv::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw CorruptFile("'" + path.string() + "' is not valid JSON: " + e.what());
    }
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& out_dir, std::string_view command) {
  return out_dir / ("manifest-" + std::string(command) + ".json");
}

// One command per output directory at a time.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& out_dir) : path_(out_dir / ".nanf.lock") {
    std::filesystem::create_directories(out_dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw Error("output directory '" + out_dir.string() + "' is locked by another run (remove '" + path_.string() +
                  "' if stale)");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace nanfml
