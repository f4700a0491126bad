#pragma once

// Dataset files: values CSV (header node names, empty field = missing), mask
// CSV of 0/1 with the same shape, and a headerless N x N adjacency CSV.
// Multi-channel data uses one file per channel with a `_c{k}` suffix.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "costi/data.hpp"

namespace costi {

namespace csv_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::string where(const std::string& path, std::size_t row, std::size_t col) {
  return path + ": row " + std::to_string(row) + ", column " + std::to_string(col);
}

inline double parse_number(const std::string& field, const std::string& path, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw DataError(where(path, row, col) + ": non-numeric value '" + field + "'");
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

inline Table read_table(const std::string& path, bool has_header) {
  const auto lines = read_lines(path);
  Table t;
  std::size_t first = 0;
  if (has_header) {
    if (lines.empty()) throw DataError(path + ": missing header row");
    t.header = split_fields(lines[0]);
    first = 1;
  }
  std::size_t width = has_header ? t.header.size() : 0;
  for (std::size_t r = first; r < lines.size(); ++r) {
    const auto fields = split_fields(lines[r]);
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw DataError(path + ": row " + std::to_string(r + 1) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(width));
    std::vector<std::optional<double>> row(width);
    for (std::size_t c = 0; c < width; ++c)
      if (!fields[c].empty()) row[c] = parse_number(fields[c], path, r + 1, c + 1);
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// `dir/values.csv` -> `dir/values_c{k}.csv`.
inline std::string channel_path(const std::string& path, std::size_t k) {
  const std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + "_c" + std::to_string(k) + p.extension().string())).string();
}

/// The file itself for a single channel, else the `_c0`, `_c1`, ... sequence.
inline std::vector<std::string> channel_files(const std::string& path) {
  if (std::filesystem::exists(path)) return {path};
  std::vector<std::string> files;
  for (std::size_t k = 0; std::filesystem::exists(channel_path(path, k)); ++k) files.push_back(channel_path(path, k));
  if (files.empty()) throw DataError("cannot open " + path);
  return files;
}

}  // namespace csv_detail

inline Graph load_adjacency_csv(const std::string& path, std::size_t nodes) {
  const auto t = csv_detail::read_table(path, false);
  if (t.rows.size() != nodes || (nodes && t.rows[0].size() != nodes))
    throw DataError(path + ": adjacency must be " + std::to_string(nodes) + " x " + std::to_string(nodes));
  Graph g;
  g.nodes = nodes;
  g.adjacency.resize(nodes * nodes);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = 0; j < nodes; ++j) {
      if (!t.rows[i][j]) throw DataError(csv_detail::where(path, i + 1, j + 1) + ": empty adjacency entry");
      const double v = *t.rows[i][j];
      if (v < 0.0) throw DataError(csv_detail::where(path, i + 1, j + 1) + ": negative adjacency weight");
      g.adjacency[i * nodes + j] = v;
    }
  return g;
}

/// Loads a dataset. Missing cells (empty fields or mask 0) get value 0 and
/// M = 0. Without an adjacency file the graph has no edges. The split is the
/// default chronological 70/10/20.
inline Dataset load_csv(const std::string& values_path, const std::optional<std::string>& mask_path = std::nullopt,
                        const std::optional<std::string>& adjacency_path = std::nullopt) {
  const auto value_files = csv_detail::channel_files(values_path);
  std::vector<std::string> mask_files;
  if (mask_path) {
    mask_files = csv_detail::channel_files(*mask_path);
    if (mask_files.size() != value_files.size())
      throw DataError("mask files cover " + std::to_string(mask_files.size()) + " channels, values cover " +
                      std::to_string(value_files.size()));
  }
  Dataset ds;
  const std::size_t channels = value_files.size();
  for (std::size_t k = 0; k < channels; ++k) {
    const auto vt = csv_detail::read_table(value_files[k], true);
    if (k == 0) {
      ds.dims = Dims{vt.rows.size(), vt.header.size(), channels};
      if (ds.dims.steps == 0 || ds.dims.nodes == 0) throw DataError(value_files[k] + ": no data");
      ds.values.assign(ds.dims.size(), 0.0);
      ds.mask.assign(ds.dims.size(), 0);
      ds.graph.labels = vt.header;
    } else if (vt.rows.size() != ds.dims.steps || vt.header.size() != ds.dims.nodes) {
      throw DataError(value_files[k] + ": shape differs from channel 0");
    }
    std::optional<csv_detail::Table> mt;
    if (!mask_files.empty()) {
      mt = csv_detail::read_table(mask_files[k], true);
      if (mt->rows.size() != vt.rows.size() || mt->header.size() != vt.header.size())
        throw DataError(mask_files[k] + ": shape " + std::to_string(mt->rows.size()) + " x " +
                        std::to_string(mt->header.size()) + " differs from values " + std::to_string(vt.rows.size()) +
                        " x " + std::to_string(vt.header.size()));
    }
    for (std::size_t t = 0; t < ds.dims.steps; ++t)
      for (std::size_t n = 0; n < ds.dims.nodes; ++n) {
        bool observed = vt.rows[t][n].has_value();
        if (mt) {
          const auto& m = mt->rows[t][n];
          if (!m || (*m != 0.0 && *m != 1.0))
            throw DataError(csv_detail::where(mask_files[k], t + 2, n + 1) + ": mask entries must be 0 or 1");
          observed = observed && *m == 1.0;
        }
        const std::size_t i = ds.dims.index(t, n, k);
        ds.mask[i] = observed ? 1 : 0;
        ds.values[i] = observed ? *vt.rows[t][n] : 0.0;
      }
  }
  if (adjacency_path) {
    auto labels = std::move(ds.graph.labels);
    ds.graph = load_adjacency_csv(*adjacency_path, ds.dims.nodes);
    ds.graph.labels = std::move(labels);
  } else {
    ds.graph.nodes = ds.dims.nodes;
    ds.graph.adjacency.assign(ds.dims.nodes * ds.dims.nodes, 0.0);
  }
  ds.split = chronological_split(ds.dims.steps);
  return ds;
}

inline std::vector<std::string> node_header(const Dataset& ds) {
  if (ds.graph.labels.size() == ds.dims.nodes) return ds.graph.labels;
  std::vector<std::string> h;
  for (std::size_t n = 0; n < ds.dims.nodes; ++n) h.push_back("node_" + std::to_string(n));
  return h;
}

/// Writes a dense [steps x nodes] table per channel; `present` marks cells to
/// write (others are left empty).
inline void write_values_csv(const std::string& path, const Dataset& ds, const std::vector<double>& values,
                             std::size_t channel, const Mask* present) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  const auto header = node_header(ds);
  for (std::size_t n = 0; n < header.size(); ++n) out << (n ? "," : "") << header[n];
  out << '\n';
  for (std::size_t t = 0; t < ds.dims.steps; ++t) {
    for (std::size_t n = 0; n < ds.dims.nodes; ++n) {
      const std::size_t i = ds.dims.index(t, n, channel);
      if (n) out << ',';
      if (!present || (*present)[i]) out << csv_detail::format_number(values[i]);
    }
    out << '\n';
  }
}

/// values/mask/adjacency files under `dir`, named values.csv, mask.csv and
/// adjacency.csv (values_c{k}.csv etc. for several channels).
inline void save_csv(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string values = (std::filesystem::path(dir) / "values.csv").string();
  const std::string mask = (std::filesystem::path(dir) / "mask.csv").string();
  std::vector<double> mask_values(ds.mask.begin(), ds.mask.end());
  for (std::size_t k = 0; k < ds.dims.channels; ++k) {
    const bool multi = ds.dims.channels > 1;
    write_values_csv(multi ? csv_detail::channel_path(values, k) : values, ds, ds.values, k, &ds.mask);
    write_values_csv(multi ? csv_detail::channel_path(mask, k) : mask, ds, mask_values, k, nullptr);
  }
  std::ofstream adj((std::filesystem::path(dir) / "adjacency.csv").string());
  if (!adj) throw DataError("cannot write adjacency.csv in " + dir);
  for (std::size_t i = 0; i < ds.graph.nodes; ++i) {
    for (std::size_t j = 0; j < ds.graph.nodes; ++j)
      adj << (j ? "," : "") << csv_detail::format_number(ds.graph.at(i, j));
    adj << '\n';
  }
}

}  // namespace costi
