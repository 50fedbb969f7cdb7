#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fewlabel/chart.hpp"
#include "fewlabel/metrics.hpp"
#include "fewlabel/trainer.hpp"

namespace fewlabel {

// Final (largest-step) record per (method, k, seed), assembled from every
// metrics.jsonl under a log directory.
struct FinalEntry {
  std::string method;
  double k_percent = 100.0;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  double fid = 0.0;
  double is = 0.0;
  bool collapsed = false;
};

inline std::vector<FinalEntry> collect_finals(const std::string& log_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(log_dir)) throw ConfigError("log directory does not exist: " + log_dir);
  std::map<std::tuple<std::string, double, std::uint64_t>, FinalEntry> finals;
  for (const auto& entry : fs::recursive_directory_iterator(log_dir)) {
    if (!entry.is_regular_file() || entry.path().filename() != "metrics.jsonl") continue;
    for (const auto& rec : read_metrics_records(entry.path().string())) {
      const auto key = std::make_tuple(rec.method, rec.k_percent, rec.seed);
      auto it = finals.find(key);
      if (it == finals.end() || rec.step >= it->second.step) {
        FinalEntry fe;
        fe.method = rec.method;
        fe.k_percent = rec.k_percent;
        fe.seed = rec.seed;
        fe.step = rec.step;
        fe.fid = rec.fid_mean;
        fe.is = rec.is_mean;
        fe.collapsed = rec.collapsed;
        finals[key] = fe;
      }
    }
  }
  std::vector<FinalEntry> out;
  for (auto& [k, v] : finals) out.push_back(std::move(v));
  if (out.empty()) throw ConfigError("no completed metric logs under: " + log_dir);
  return out;
}

namespace detail {

inline std::string fmt1(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << v;
  return ss.str();
}

inline std::string fmt2(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

struct Cell {
  std::vector<const FinalEntry*> entries;  // per-seed finals
  std::vector<double> values(bool use_fid) const {
    std::vector<double> v;
    for (const auto* e : entries) v.push_back(use_fid ? e->fid : e->is);
    return v;
  }
};

using Grid = std::map<std::pair<std::string, double>, Cell>;

inline Grid group_cells(const std::vector<FinalEntry>& finals) {
  Grid grid;
  for (const auto& f : finals) grid[{f.method, f.k_percent}].entries.push_back(&f);
  return grid;
}

inline std::vector<std::string> method_order(const Grid& grid) {
  // canonical registry order first, then anything else alphabetically
  const std::vector<std::string> canonical = {
      "BIGGAN",     "RANDOM_LABEL", "SINGLE_LABEL", "SINGLE_LABEL_SS", "CLUSTERING",
      "CLUSTERING_SS", "BIGGAN_K",  "S2GAN_CO",     "S2GAN",           "S3GAN_CO",
      "S3GAN"};
  std::set<std::string> seen;
  for (const auto& [key, cell] : grid) seen.insert(key.first);
  std::vector<std::string> out;
  for (const auto& m : canonical) {
    if (seen.count(m)) {
      out.push_back(m);
      seen.erase(m);
    }
  }
  out.insert(out.end(), seen.begin(), seen.end());
  return out;
}

inline std::vector<double> k_order(const Grid& grid) {
  std::set<double> ks;
  for (const auto& [key, cell] : grid) ks.insert(key.second);
  return {ks.begin(), ks.end()};
}

}  // namespace detail

// Median grid over methods x k%, one table per metric. Cells are "median"
// (1 decimal); absent combinations print "-".
inline std::string render_median_table(const std::vector<FinalEntry>& finals, bool use_fid) {
  const auto grid = detail::group_cells(finals);
  const auto methods = detail::method_order(grid);
  const auto ks = detail::k_order(grid);
  std::ostringstream out;
  out << "median " << (use_fid ? "FID" : "IS") << " (methods x labeled fraction)\n";
  out << std::left << std::setw(18) << "method";
  for (double k : ks) out << std::setw(10) << ("k=" + detail::fmt1(k) + "%");
  out << "\n";
  for (const auto& m : methods) {
    out << std::left << std::setw(18) << m;
    for (double k : ks) {
      auto it = grid.find({m, k});
      if (it == grid.end()) {
        out << std::setw(10) << "-";
      } else {
        out << std::setw(10) << detail::fmt1(median_of(it->second.values(use_fid)));
      }
    }
    out << "\n";
  }
  return out.str();
}

// Mean +/- population std grid; the std is omitted for single-seed cells.
inline std::string render_meanstd_table(const std::vector<FinalEntry>& finals, bool use_fid) {
  const auto grid = detail::group_cells(finals);
  const auto methods = detail::method_order(grid);
  const auto ks = detail::k_order(grid);
  std::ostringstream out;
  out << "mean+-std " << (use_fid ? "FID" : "IS") << " (methods x labeled fraction)\n";
  out << std::left << std::setw(18) << "method";
  for (double k : ks) out << std::setw(14) << ("k=" + detail::fmt1(k) + "%");
  out << "\n";
  for (const auto& m : methods) {
    out << std::left << std::setw(18) << m;
    for (double k : ks) {
      auto it = grid.find({m, k});
      if (it == grid.end()) {
        out << std::setw(14) << "-";
      } else {
        const auto values = it->second.values(use_fid);
        const auto [mean, sd] = mean_and_std(values);
        std::string cell = detail::fmt1(mean);
        if (values.size() > 1) cell += "+-" + detail::fmt2(sd);
        out << std::setw(14) << cell;
      }
    }
    out << "\n";
  }
  return out.str();
}

// Every chart/table cell traces back to (method, seed set, step).
inline std::string render_provenance(const std::vector<FinalEntry>& finals) {
  const auto grid = detail::group_cells(finals);
  std::ostringstream out;
  for (const auto& [key, cell] : grid) {
    out << "method=" << key.first << " k=" << detail::fmt1(key.second) << " seeds=[";
    for (std::size_t i = 0; i < cell.entries.size(); ++i) {
      const auto* e = cell.entries[i];
      out << e->seed << ":step" << e->step << (e->collapsed ? ":collapsed" : "");
      if (i + 1 < cell.entries.size()) out << ", ";
    }
    out << "]\n";
  }
  return out.str();
}

struct ReportPaths {
  std::string median_fid, median_is, meanstd_fid, meanstd_is, provenance;
  std::vector<std::string> charts;
};

// Emits the tables plus one horizontal median-FID bar chart per k value,
// with a vertical reference line at the fully supervised baseline's median
// when a BIGGAN run is present.
inline ReportPaths write_report(const std::vector<FinalEntry>& finals,
                                const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ReportPaths paths;
  auto write = [&](const std::string& name, const std::string& content) {
    const std::string path = out_dir + "/" + name;
    std::ofstream f(path, std::ios::trunc);
    f << content;
    return path;
  };
  paths.median_fid = write("median_fid.txt", render_median_table(finals, true));
  paths.median_is = write("median_is.txt", render_median_table(finals, false));
  paths.meanstd_fid = write("meanstd_fid.txt", render_meanstd_table(finals, true));
  paths.meanstd_is = write("meanstd_is.txt", render_meanstd_table(finals, false));
  paths.provenance = write("provenance.txt", render_provenance(finals));

  const auto grid = detail::group_cells(finals);
  const auto methods = detail::method_order(grid);
  // baseline: fully supervised BIGGAN median (any k column, conventionally 100)
  double baseline = -1.0;
  for (const auto& [key, cell] : grid) {
    if (key.first == "BIGGAN") baseline = median_of(cell.values(true));
  }
  for (double k : detail::k_order(grid)) {
    std::vector<BarChartEntry> entries;
    for (const auto& m : methods) {
      auto it = grid.find({m, k});
      if (it == grid.end()) continue;
      entries.push_back({m, median_of(it->second.values(true))});
    }
    if (entries.empty()) continue;
    std::ostringstream name;
    name << "median_fid_k" << detail::fmt1(k) << ".bmp";
    const std::string path = out_dir + "/" + name.str();
    write_bar_chart(path, "MEDIAN FID AT K=" + detail::fmt1(k) + "%", entries, baseline,
                    baseline > 0 ? "BIGGAN" : "");
    paths.charts.push_back(path);
  }
  return paths;
}

}  // namespace fewlabel
