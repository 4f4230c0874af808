#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "jscc/error.hpp"

namespace jscc {

/// Fixed-precision rendering shared by every CSV cell, so that aggregates
/// recomputed from a CSV match the report.
inline std::string format_number(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

inline double parse_number(const std::string& s) {
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  if (s == "nan" || s.empty()) return NAN;
  return std::stod(s);
}

/// Simple in-memory CSV table with a fixed header.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) {
      throw ConfigError("CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header_.size()));
    }
    rows_.push_back(std::move(cells));
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header_.size(); ++i)
      if (header_[i] == name) return i;
    throw ConfigError("no CSV column named " + name);
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  static CsvTable parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& l) {
      std::vector<std::string> cells;
      std::stringstream ss(l);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (!l.empty() && l.back() == ',') cells.emplace_back();
      return cells;
    };
    if (!std::getline(in, line)) throw DataError("empty CSV");
    CsvTable t(split(line));
    while (std::getline(in, line)) {
      if (!line.empty()) t.add_row(split(line));
    }
    return t;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------------------
// Statistics

/// One-sided exact sign test: P(X >= positives) for X ~ Bin(positives +
/// negatives, 1/2). Ties are discarded by the caller.
inline double sign_test_p(long positives, long negatives) {
  const long n = positives + negatives;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (long k = positives; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

struct PairedSummary {
  long count = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double mean_delta = 0.0;  ///< mean of (b - a)
  long positives = 0;
  long negatives = 0;
  long ties = 0;
  double p_value = 1.0;  ///< one-sided sign test for b > a
};

/// Paired comparison of two columns; values above `cap` are clipped first.
inline PairedSummary summarize_pairs(const std::vector<double>& a, const std::vector<double>& b,
                                     double cap = INFINITY) {
  PairedSummary s;
  s.count = long(a.size());
  if (a.empty()) return s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = std::min(a[i], cap), y = std::min(b[i], cap);
    s.mean_a += x;
    s.mean_b += y;
    s.mean_delta += y - x;
    if (y > x) ++s.positives;
    else if (y < x) ++s.negatives;
    else ++s.ties;
  }
  s.mean_a /= double(a.size());
  s.mean_b /= double(a.size());
  s.mean_delta /= double(a.size());
  s.p_value = sign_test_p(s.positives, s.negatives);
  return s;
}

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<long> counts;
};

/// Equal-width bins over [min, max] of the samples (max lands in the last
/// bin). A degenerate range collapses to a single bin.
inline Histogram make_histogram(const std::vector<double>& samples, int bins) {
  Histogram h;
  if (samples.empty()) return h;
  h.lo = *std::min_element(samples.begin(), samples.end());
  h.hi = *std::max_element(samples.begin(), samples.end());
  if (!(h.hi > h.lo)) {
    h.counts = {long(samples.size())};
    return h;
  }
  h.counts.assign(std::size_t(bins), 0);
  const double width = (h.hi - h.lo) / bins;
  for (double v : samples) {
    int b = int((v - h.lo) / width);
    h.counts[std::size_t(std::clamp(b, 0, bins - 1))]++;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Output files

/// Named text outputs plus the run manifest, written together at the end of
/// a run.
struct Report {
  std::string dir;
  std::map<std::string, std::string> files;
  nlohmann::json manifest;

  std::string path(const std::string& name) const { return (std::filesystem::path(dir) / name).string(); }
};

/// Creates the output directory and probes that `names` can be written, so
/// that an unusable destination fails before any computation.
inline void ensure_writable(const std::string& dir, const std::vector<std::string>& names) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
  for (const auto& n : names) {
    const auto p = std::filesystem::path(dir) / n;
    const bool existed = std::filesystem::exists(p);
    std::ofstream probe(p, std::ios::app);
    if (!probe) throw ConfigError("output path is not writable: " + p.string());
    probe.close();
    if (!existed) std::filesystem::remove(p, ec);
  }
}

inline void emit_report(const Report& r) {
  ensure_writable(r.dir, {});
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(r.path(name), std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + r.path(name));
    out << text;
  };
  for (const auto& [name, text] : r.files) write(name, text);
  write("manifest.json", r.manifest.dump(2) + "\n");
}

}  // namespace jscc
