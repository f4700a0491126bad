#pragma once

// Metrics, baselines, sensitivity sweeps, timing benchmarks, ablations and
// report serialization.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "costi/data.hpp"
#include "costi/network.hpp"
#include "costi/sampling.hpp"
#include "costi/training.hpp"

namespace costi {

struct MetricReport {
  std::string label;
  double mae = 0.0;
  double mse = 0.0;
  std::size_t n_evaluated = 0;
  std::vector<double> node_mae;  // NaN for nodes without evaluated cells
  double runtime_seconds = 0.0;
  std::size_t forward_passes = 0;

  bool operator==(const MetricReport&) const = default;
};

struct ErrorPair {
  double mae;
  double mse;
};

inline ErrorPair masked_mae_mse(const std::vector<double>& truth, const std::vector<double>& pred, const Mask& mask) {
  if (truth.size() != pred.size() || truth.size() != mask.size())
    throw ShapeError("masked_mae_mse: size mismatch");
  double abs_sum = 0.0, sq_sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask[i]) continue;
    const double e = pred[i] - truth[i];
    abs_sum += std::fabs(e);
    sq_sum += e * e;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("masked_mae_mse: empty evaluation mask");
  return {abs_sum / static_cast<double>(n), sq_sum / static_cast<double>(n)};
}

/// Visible cells kept, hidden cells filled with the training mean (0 after standardization).
inline std::vector<double> baseline_mean(const Window& w) { return visible_values(w); }

inline std::vector<double> baseline_linear(const Window& w) {
  return linear_interpolate(visible_values(w), w.cond, w.dims);
}

/// Metrics in original units over the eval cells of standardized windows.
inline MetricReport evaluate_predictions(std::string label, const std::vector<Window>& windows,
                                         const std::vector<std::vector<double>>& predictions, const Normalizer& norm) {
  if (windows.size() != predictions.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
  MetricReport r;
  r.label = std::move(label);
  if (windows.empty()) throw std::invalid_argument("evaluate: no windows");
  const Dims d = windows.front().dims;
  std::vector<double> node_sum(d.nodes, 0.0);
  std::vector<std::size_t> node_n(d.nodes, 0);
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto truth = norm.invert(windows[k].values);
    const auto pred = norm.invert(predictions[k]);
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (!windows[k].eval[i]) continue;
      const double e = pred[i] - truth[i];
      abs_sum += std::fabs(e);
      sq_sum += e * e;
      ++r.n_evaluated;
      const std::size_t node = (i / d.channels) % d.nodes;
      node_sum[node] += std::fabs(e);
      ++node_n[node];
    }
  }
  if (r.n_evaluated == 0) throw std::invalid_argument("evaluate: empty evaluation mask");
  r.mae = abs_sum / static_cast<double>(r.n_evaluated);
  r.mse = sq_sum / static_cast<double>(r.n_evaluated);
  r.node_mae.resize(d.nodes);
  for (std::size_t n = 0; n < d.nodes; ++n)
    r.node_mae[n] = node_n[n] ? node_sum[n] / static_cast<double>(node_n[n]) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

inline MetricReport evaluate_baseline_mean(const std::vector<Window>& windows, const Normalizer& norm) {
  std::vector<std::vector<double>> preds;
  for (const auto& w : windows) preds.push_back(baseline_mean(w));
  return evaluate_predictions("mean", windows, preds, norm);
}

inline MetricReport evaluate_baseline_linear(const std::vector<Window>& windows, const Normalizer& norm) {
  std::vector<std::vector<double>> preds;
  for (const auto& w : windows) preds.push_back(baseline_linear(w));
  return evaluate_predictions("linear", windows, preds, norm);
}

/// Imputes every window and scores the merged output; the runtime covers the
/// sampling only.
template <typename T>
MetricReport evaluate_model(std::string label, const Model<T>& model, const ParamStore<T>& params,
                            const NoiseSchedule& schedule, const std::vector<Window>& windows, const Normalizer& norm,
                            const Tensor<T>& adjacency, const SamplerConfig& cfg) {
  std::vector<ImputationTask> tasks;
  for (const auto& w : windows) tasks.push_back(make_task(w));
  const std::size_t before = model.forward_evaluations();
  const auto started = std::chrono::steady_clock::now();
  const auto results = impute_many(model, params, schedule, tasks, adjacency, cfg, false);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  const std::size_t passes = model.forward_evaluations() - before;
  std::vector<std::vector<double>> preds;
  for (const auto& r : results) preds.push_back(r.merged);
  MetricReport rep = evaluate_predictions(std::move(label), windows, preds, norm);
  rep.runtime_seconds = seconds;
  rep.forward_passes = passes;
  return rep;
}

/// Window starts covering [0, steps) with length L: stride L plus one final
/// window aligned to the end when L does not divide the length.
inline std::vector<std::size_t> covering_starts(std::size_t steps, std::size_t length) {
  if (length == 0 || steps < length) throw DataError("series shorter than the window length");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + length <= steps; s += length) starts.push_back(s);
  if (starts.back() + length < steps) starts.push_back(steps - length);
  return starts;
}

/// Imputes every missing cell of a dataset in original units. Observed cells
/// are copied from the input unchanged.
template <typename T>
std::vector<double> impute_series(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                                  const Dataset& ds, const Normalizer& norm, std::size_t length,
                                  const SamplerConfig& cfg) {
  const auto starts = covering_starts(ds.dims.steps, length);
  std::vector<ImputationTask> tasks;
  for (std::size_t s : starts) {
    Window w = norm.apply(windowize(ds, length, length, s, s + length).front());
    tasks.push_back(make_task(w));
  }
  const auto results = impute_many(model, params, schedule, tasks, normalized_adjacency<T>(ds.graph), cfg, false);
  std::vector<double> out = ds.values;
  const std::size_t row = ds.dims.nodes * ds.dims.channels;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const auto pred = norm.invert(results[k].merged);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const std::size_t g = starts[k] * row + i;
      if (!ds.mask[g]) out[g] = pred[i];
    }
  }
  return out;
}

inline std::vector<double> default_missing_rates() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

struct SensitivityRow {
  double rate;
  MetricReport report;
};

/// One-step imputation quality as the point-missing rate grows. Masks for
/// rate index r use seed stream r.
template <typename T>
std::vector<SensitivityRow> sensitivity_sweep(const Model<T>& model, const ParamStore<T>& params,
                                              const NoiseSchedule& schedule, const std::vector<Window>& windows,
                                              const Normalizer& norm, const Tensor<T>& adjacency,
                                              const SamplerConfig& cfg, const std::vector<double>& rates,
                                              std::uint64_t seed) {
  std::vector<SensitivityRow> rows;
  for (std::size_t r = 0; r < rates.size(); ++r) {
    if (!(rates[r] > 0.0 && rates[r] < 1.0)) throw std::invalid_argument("sensitivity: rates must lie in (0, 1)");
    const auto masked = with_point_mask(windows, rates[r], derive_seed(seed, r));
    std::ostringstream label;
    label << "rate=" << rates[r];
    rows.push_back({rates[r], evaluate_model(label.str(), model, params, schedule, masked, norm, adjacency, cfg)});
  }
  return rows;
}

struct SigmaSearchRow {
  double sigma;
  MetricReport report;
};

/// Candidate second-step noise levels, log-spaced over [lo, hi].
inline std::vector<double> candidate_sigmas(double lo, double hi, std::size_t count) {
  if (!(lo > 0.0 && hi > lo) || count < 2) throw std::invalid_argument("candidate_sigmas: need 0 < lo < hi and count >= 2");
  std::vector<double> g(count);
  for (std::size_t i = 0; i < count; ++i)
    g[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * static_cast<double>(i) / static_cast<double>(count - 1));
  return g;
}

/// Scores two-step sampling {σ_max, σ} for every candidate σ; the best row is
/// the one with the lowest MAE (first on ties).
template <typename T>
std::vector<SigmaSearchRow> sigma_search(const Model<T>& model, const ParamStore<T>& params,
                                         const NoiseSchedule& schedule, const std::vector<Window>& windows,
                                         const Normalizer& norm, const Tensor<T>& adjacency, const SamplerConfig& base,
                                         const std::vector<double>& candidates) {
  std::vector<SigmaSearchRow> rows;
  for (double s : candidates) {
    SamplerConfig cfg = base;
    cfg.sigmas = {schedule.sigma_max, s};
    cfg.validate(schedule);
    std::ostringstream label;
    label << "sigma=" << s;
    rows.push_back({s, evaluate_model(label.str(), model, params, schedule, windows, norm, adjacency, cfg)});
  }
  return rows;
}

inline std::size_t best_sigma_index(const std::vector<SigmaSearchRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("sigma search: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].report.mae < rows[best].report.mae) best = i;
  return best;
}

struct TimingRow {
  std::size_t steps;
  double wall_seconds;
  std::size_t forward_passes;
};

/// Wall clock of full imputation of `windows` per sampling step count, with
/// geometric noise levels and identical ensemble size.
template <typename T>
std::vector<TimingRow> timing_bench(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                                    const std::vector<Window>& windows, const Tensor<T>& adjacency,
                                    const SamplerConfig& base, const std::vector<std::size_t>& step_counts) {
  std::vector<ImputationTask> tasks;
  for (const auto& w : windows) tasks.push_back(make_task(w));
  std::vector<TimingRow> rows;
  for (std::size_t steps : step_counts) {
    SamplerConfig cfg = base;
    cfg.sigmas = geometric_sigmas(steps, schedule.sigma_max, schedule.sigma_min);
    const std::size_t before = model.forward_evaluations();
    const auto started = std::chrono::steady_clock::now();
    impute_many(model, params, schedule, tasks, adjacency, cfg, false);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    rows.push_back({steps, seconds, model.forward_evaluations() - before});
  }
  return rows;
}

enum class Ablation { full, no_cond, no_stfem, no_nem, no_self_attention };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_cond: return "w/o cond";
    case Ablation::no_stfem: return "w/o stfem";
    case Ablation::no_nem: return "w/o nem";
    case Ablation::no_self_attention: return "w/o self-attention";
  }
  return "?";
}

inline ModelConfig apply_ablation(ModelConfig c, Ablation a) {
  switch (a) {
    case Ablation::full: break;
    case Ablation::no_cond: c.use_cond = false; break;
    case Ablation::no_stfem: c.use_stfem = false; break;
    case Ablation::no_nem: c.use_nem = false; break;
    case Ablation::no_self_attention: c.use_self_attention = false; break;
  }
  return c;
}

inline std::vector<Ablation> all_ablations() {
  return {Ablation::full, Ablation::no_cond, Ablation::no_stfem, Ablation::no_nem, Ablation::no_self_attention};
}

struct AblationRow {
  Ablation flag;
  bool reference;
  MetricReport report;
};

/// Trains one model per configuration and scores 1-step imputation on the
/// validation windows under a fixed point mask.
template <typename T>
std::vector<AblationRow> ablation_suite(const PreparedData& data, const ModelConfig& base, const TrainConfig& train_cfg,
                                        const SamplerConfig& sampler, const std::vector<Ablation>& flags) {
  std::vector<AblationRow> rows;
  const Tensor<T> adjacency = normalized_adjacency<T>(data.graph);
  const auto val = with_point_mask(data.val, train_cfg.val_point_rate, derive_seed(train_cfg.seed, 3));
  std::vector<Ablation> order = flags;
  bool has_full = false;
  for (auto f : order) has_full = has_full || f == Ablation::full;
  if (!has_full) order.insert(order.begin(), Ablation::full);
  for (auto flag : order) {
    const Model<T> model(apply_ablation(base, flag));
    auto result = train(model, data, train_cfg);
    rows.push_back({flag, flag == Ablation::full,
                    evaluate_model(std::string(to_string(flag)), model, result.best, train_cfg.schedule, val,
                                   data.normalizer, adjacency, sampler)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("malformed number '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

/// CSV with header `label,mae,mse,n_evaluated,runtime_seconds,forward_passes,node_mae`;
/// per-node values are joined with ';'. Labels must not contain ',' or newlines.
inline std::string reports_to_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "label,mae,mse,n_evaluated,runtime_seconds,forward_passes,node_mae\n";
  for (const auto& r : reports) {
    if (r.label.find_first_of(",\n") != std::string::npos)
      throw std::invalid_argument("report label may not contain ',' or newline");
    os << r.label << ',' << detail::format_double(r.mae) << ',' << detail::format_double(r.mse) << ','
       << r.n_evaluated << ',' << detail::format_double(r.runtime_seconds) << ',' << r.forward_passes << ',';
    for (std::size_t i = 0; i < r.node_mae.size(); ++i)
      os << (i ? ";" : "") << detail::format_double(r.node_mae[i]);
    os << '\n';
  }
  return os.str();
}

inline std::vector<MetricReport> reports_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "label,mae,mse,n_evaluated,runtime_seconds,forward_passes,node_mae")
    throw std::invalid_argument("report csv: bad header");
  std::vector<MetricReport> out;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 7) throw std::invalid_argument("report csv: row " + std::to_string(row) + " has wrong field count");
    MetricReport r;
    r.label = f[0];
    r.mae = detail::parse_double(f[1]);
    r.mse = detail::parse_double(f[2]);
    r.n_evaluated = std::stoull(f[3]);
    r.runtime_seconds = detail::parse_double(f[4]);
    r.forward_passes = std::stoull(f[5]);
    if (!f[6].empty())
      for (const auto& v : detail::split(f[6], ';')) r.node_mae.push_back(detail::parse_double(v));
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json nodes = nlohmann::json::array();
  for (double v : r.node_mae) nodes.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  return {{"label", r.label},
          {"mae", r.mae},
          {"mse", r.mse},
          {"n_evaluated", r.n_evaluated},
          {"runtime_seconds", r.runtime_seconds},
          {"forward_passes", r.forward_passes},
          {"node_mae", nodes}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.label = j.at("label").get<std::string>();
  r.mae = j.at("mae").get<double>();
  r.mse = j.at("mse").get<double>();
  r.n_evaluated = j.at("n_evaluated").get<std::size_t>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  r.forward_passes = j.at("forward_passes").get<std::size_t>();
  for (const auto& v : j.at("node_mae"))
    r.node_mae.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  return r;
}

inline nlohmann::json reports_to_json(const std::vector<MetricReport>& reports) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : reports) a.push_back(report_to_json(r));
  return a;
}

inline std::vector<MetricReport> reports_from_json(const nlohmann::json& j) {
  std::vector<MetricReport> out;
  for (const auto& e : j) out.push_back(report_from_json(e));
  return out;
}

}  // namespace costi
