#pragma once

// Minimal CSV plumbing shared by every file schema: header-checked reading,
// fixed 9-significant-digit number output.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "nanfml/error.hpp"

namespace nanfml::csv {

// All numeric output uses 9 significant digits.
inline std::string num(double v) { return fmt::format("{:.9g}", v); }

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view field, const std::string& where) {
  while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\r')) field.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc{} || ptr != field.data() + field.size())
    throw CorruptFile(where + ": cannot parse number '" + std::string(field) + "'");
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw CorruptFile("missing column '" + std::string(name) + "'");
  }
};

// Reads a CSV whose header must start with `required` columns in that order.
inline Table read(const std::filesystem::path& path, const std::vector<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw CorruptFile("'" + path.string() + "': empty file, header expected");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto f : split(line)) t.header.emplace_back(f);
  if (t.header.size() < required.size())
    throw CorruptFile("'" + path.string() + "': header has too few columns");
  for (std::size_t i = 0; i < required.size(); ++i)
    if (t.header[i] != required[i])
      throw CorruptFile("'" + path.string() + "': expected column '" + required[i] + "' at position " +
                        std::to_string(i) + ", found '" + t.header[i] + "'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != t.header.size())
      throw CorruptFile("'" + path.string() + "' line " + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields");
    auto& row = t.rows.emplace_back();
    for (auto f : fields) row.emplace_back(f);
  }
  return t;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace nanfml::csv
