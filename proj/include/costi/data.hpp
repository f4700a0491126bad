#pragma once

// Multivariate series containers, windowing, graph construction, synthetic
// missing-data generators and linear-interpolation conditioning.
//
// All arrays are row-major [steps x nodes x channels]. Masks hold 1 for a
// present cell and 0 otherwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "costi/rng.hpp"

namespace costi {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Mask = std::vector<std::uint8_t>;

struct Dims {
  std::size_t steps = 0;
  std::size_t nodes = 0;
  std::size_t channels = 1;

  std::size_t size() const { return steps * nodes * channels; }
  std::size_t index(std::size_t t, std::size_t n, std::size_t c) const { return (t * nodes + n) * channels + c; }
  bool operator==(const Dims&) const = default;
};

/// One training/inference sample.
///   observed: recorded in the raw data
///   cond:     visible to the model after synthetic masking (cond <= observed)
///   eval:     observed && !cond (hidden but with known ground truth)
struct Window {
  Dims dims;
  std::vector<double> values;  // 0 wherever observed == 0
  Mask observed;
  Mask cond;
  Mask eval;
  std::size_t graph_id = 0;
  std::size_t start = 0;  // first row in the source series
};

/// Installs `cond` and derives eval = observed AND NOT cond.
inline void set_cond_mask(Window& w, Mask cond) {
  if (cond.size() != w.observed.size()) throw std::invalid_argument("cond mask size mismatch");
  w.eval.assign(cond.size(), 0);
  for (std::size_t i = 0; i < cond.size(); ++i) {
    cond[i] = static_cast<std::uint8_t>(cond[i] && w.observed[i]);
    w.eval[i] = static_cast<std::uint8_t>(w.observed[i] && !cond[i]);
  }
  w.cond = std::move(cond);
}

/// Values visible to the model: values * cond.
inline std::vector<double> visible_values(const Window& w) {
  std::vector<double> out(w.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w.cond[i] ? w.values[i] : 0.0;
  return out;
}

inline std::size_t count_set(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

struct Graph {
  std::size_t nodes = 0;
  std::vector<double> adjacency;  // nodes x nodes, nonnegative, zero diagonal
  std::vector<std::string> labels;

  double at(std::size_t i, std::size_t j) const { return adjacency[i * nodes + j]; }
};

struct Split {
  std::size_t train_end = 0;  // rows [0, train_end)
  std::size_t val_end = 0;    // rows [train_end, val_end); test is [val_end, steps)
};

struct Dataset {
  Dims dims;  // dims.steps is the full series length
  std::vector<double> values;
  Mask mask;
  Graph graph;
  Split split;
};

/// Chronological split by fractions (default 70/10/20).
inline Split chronological_split(std::size_t steps, double train = 0.7, double val = 0.1) {
  Split s;
  // the small slack keeps 0.8 * 300 at 240 despite 0.7 + 0.1 rounding below 0.8
  s.train_end = static_cast<std::size_t>(std::floor(train * static_cast<double>(steps) + 1e-9));
  s.val_end = static_cast<std::size_t>(std::floor((train + val) * static_cast<double>(steps) + 1e-9));
  return s;
}

// ---------------------------------------------------------------------------
// Linear interpolation
// ---------------------------------------------------------------------------

/// Fills every invisible cell of each (node, channel) series by linear
/// interpolation in time between the nearest visible neighbours. Leading and
/// trailing gaps repeat the nearest visible value; a series with no visible
/// cell becomes 0. Visible cells are returned unchanged.
inline std::vector<double> linear_interpolate(const std::vector<double>& values, const Mask& visible, const Dims& d) {
  std::vector<double> out(values.size(), 0.0);
  for (std::size_t n = 0; n < d.nodes; ++n)
    for (std::size_t c = 0; c < d.channels; ++c) {
      std::ptrdiff_t prev = -1;
      for (std::size_t t = 0; t <= d.steps; ++t) {
        const bool at_end = t == d.steps;
        if (!at_end && !visible[d.index(t, n, c)]) continue;
        const std::ptrdiff_t cur = at_end ? -1 : static_cast<std::ptrdiff_t>(t);
        const std::size_t gap_begin = prev < 0 ? 0 : static_cast<std::size_t>(prev) + 1;
        for (std::size_t g = gap_begin; g < t; ++g) {
          double v = 0.0;
          if (prev >= 0 && cur >= 0) {
            const double a = values[d.index(static_cast<std::size_t>(prev), n, c)];
            const double b = values[d.index(t, n, c)];
            const double frac = static_cast<double>(g - static_cast<std::size_t>(prev)) /
                                static_cast<double>(t - static_cast<std::size_t>(prev));
            v = a + frac * (b - a);
          } else if (prev >= 0) {
            v = values[d.index(static_cast<std::size_t>(prev), n, c)];
          } else if (cur >= 0) {
            v = values[d.index(t, n, c)];
          }
          out[d.index(g, n, c)] = v;
        }
        if (!at_end) {
          out[d.index(t, n, c)] = values[d.index(t, n, c)];
          prev = cur;
        }
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Missing-data generators. Each returns cond <= observed.
// ---------------------------------------------------------------------------

/// Draws a rate uniformly from [rate_lo, rate_hi] and hides exactly
/// round(rate * #observed) observed cells, chosen uniformly without replacement.
inline Mask mask_point(const Mask& observed, double rate_lo, double rate_hi, Rng& rng) {
  const double rate = rng.uniform(rate_lo, rate_hi);
  std::vector<std::size_t> present;
  present.reserve(observed.size());
  for (std::size_t i = 0; i < observed.size(); ++i)
    if (observed[i]) present.push_back(i);
  const auto hide = static_cast<std::size_t>(std::llround(rate * static_cast<double>(present.size())));
  Mask out = observed;
  for (std::size_t k = 0; k < hide && k < present.size(); ++k) {
    const std::size_t j = k + rng.uniform_index(present.size() - k);
    std::swap(present[k], present[j]);
    out[present[k]] = 0;
  }
  return out;
}

struct BlockMaskConfig {
  double fail_prob_lo = 0.0;
  double fail_prob_hi = 0.15;
  double extra_point = 0.05;
  std::size_t min_len = 0;  // 0 = ceil(L/2)
  std::size_t max_len = 0;  // 0 = L
};

/// Per (node, channel): with a probability drawn once per window from the
/// failure range, hides one contiguous block whose length is uniform in
/// [min_len, max_len] at a uniform start inside the window; then hides an
/// extra `extra_point` fraction of what remains.
inline Mask mask_block(const Mask& observed, const Dims& d, const BlockMaskConfig& cfg, Rng& rng) {
  const std::size_t lo = cfg.min_len ? cfg.min_len : (d.steps + 1) / 2;
  const std::size_t hi = std::min(cfg.max_len ? cfg.max_len : d.steps, d.steps);
  const double p = rng.uniform(cfg.fail_prob_lo, cfg.fail_prob_hi);
  Mask out = observed;
  for (std::size_t n = 0; n < d.nodes; ++n)
    for (std::size_t c = 0; c < d.channels; ++c) {
      if (!rng.bernoulli(p)) continue;
      const std::size_t len = rng.uniform_int(std::min(lo, hi), hi);
      const std::size_t start = rng.uniform_int(0, d.steps - len);
      for (std::size_t t = start; t < start + len; ++t) out[d.index(t, n, c)] = 0;
    }
  return mask_point(out, cfg.extra_point, cfg.extra_point, rng);
}

struct OutageMaskConfig {
  double start_prob = 0.0015;  // per (step, node, channel)
  std::size_t min_len = 12;
  std::size_t max_len = 48;
  double point_rate = 0.05;
};

/// Evaluation "block missing" scenario: sensor outages start at each cell with
/// a small probability and last a uniform number of steps; plus point noise.
inline Mask mask_outage(const Mask& observed, const Dims& d, const OutageMaskConfig& cfg, Rng& rng) {
  Mask out = mask_point(observed, cfg.point_rate, cfg.point_rate, rng);
  for (std::size_t n = 0; n < d.nodes; ++n)
    for (std::size_t c = 0; c < d.channels; ++c)
      for (std::size_t t = 0; t < d.steps; ++t) {
        if (!rng.bernoulli(cfg.start_prob)) continue;
        const std::size_t len = rng.uniform_int(cfg.min_len, cfg.max_len);
        for (std::size_t u = t; u < std::min(d.steps, t + len); ++u) out[d.index(u, n, c)] = 0;
      }
  return out;
}

/// Intersects the observed mask with a stored real missingness pattern.
inline Mask mask_historical(const Mask& observed, const std::vector<Mask>& bank, Rng& rng) {
  if (bank.empty()) throw std::invalid_argument("mask_historical: empty pattern bank");
  const Mask& pattern = bank[rng.uniform_index(bank.size())];
  if (pattern.size() != observed.size()) throw std::invalid_argument("mask_historical: pattern size mismatch");
  Mask out(observed.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint8_t>(observed[i] && pattern[i]);
  return out;
}

enum class SecondaryMask { block, historical };

/// With probability 1/2 the point strategy over [0, 1], otherwise the secondary strategy.
inline Mask mask_hybrid(const Mask& observed, const Dims& d, SecondaryMask secondary, const BlockMaskConfig& block,
                        const std::vector<Mask>& bank, Rng& rng) {
  if (rng.uniform() < 0.5) return mask_point(observed, 0.0, 1.0, rng);
  if (secondary == SecondaryMask::block) return mask_block(observed, d, block, rng);
  return mask_historical(observed, bank, rng);
}

enum class MaskStrategy { point, block_hybrid, historical_hybrid };

inline std::string_view to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::point: return "point";
    case MaskStrategy::block_hybrid: return "block_hybrid";
    case MaskStrategy::historical_hybrid: return "historical_hybrid";
  }
  return "?";
}

inline MaskStrategy parse_mask_strategy(std::string_view name) {
  for (auto s : {MaskStrategy::point, MaskStrategy::block_hybrid, MaskStrategy::historical_hybrid})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown mask strategy '" + std::string(name) + "'");
}

/// Applies a training-time strategy to a window, setting cond and eval.
inline void apply_mask_strategy(Window& w, MaskStrategy s, const std::vector<Mask>& bank, Rng& rng,
                                const BlockMaskConfig& block = {}) {
  Mask cond;
  switch (s) {
    case MaskStrategy::point: cond = mask_point(w.observed, 0.0, 1.0, rng); break;
    case MaskStrategy::block_hybrid:
      cond = mask_hybrid(w.observed, w.dims, SecondaryMask::block, block, bank, rng);
      break;
    case MaskStrategy::historical_hybrid:
      cond = mask_hybrid(w.observed, w.dims, SecondaryMask::historical, block, bank, rng);
      break;
  }
  set_cond_mask(w, std::move(cond));
}

// ---------------------------------------------------------------------------
// Graphs
// ---------------------------------------------------------------------------

/// A_ij = exp(-dist_ij^2 / bandwidth^2) when that is >= threshold, else 0; A_ii = 0.
inline Graph adjacency_gaussian(const std::vector<double>& dist, std::size_t nodes, double threshold, double bandwidth) {
  if (dist.size() != nodes * nodes) throw std::invalid_argument("adjacency_gaussian: distance matrix must be N x N");
  Graph g;
  g.nodes = nodes;
  g.adjacency.assign(nodes * nodes, 0.0);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = 0; j < nodes; ++j) {
      const double dij = dist[i * nodes + j];
      if (dij < 0.0 || std::isnan(dij)) throw std::invalid_argument("adjacency_gaussian: negative distance");
      if (i == j) continue;
      const double w = std::exp(-(dij * dij) / (bandwidth * bandwidth));
      g.adjacency[i * nodes + j] = w >= threshold ? w : 0.0;
    }
  return g;
}

/// A_ij = |Pearson correlation| of nodes i and j over the cells where both are
/// observed (all steps and channels pooled); fewer than 3 shared cells gives 0.
inline Graph adjacency_correlation(const std::vector<double>& values, const Mask& mask, const Dims& d) {
  Graph g;
  g.nodes = d.nodes;
  g.adjacency.assign(d.nodes * d.nodes, 0.0);
  for (std::size_t i = 0; i < d.nodes; ++i)
    for (std::size_t j = i + 1; j < d.nodes; ++j) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      std::size_t count = 0;
      for (std::size_t t = 0; t < d.steps; ++t)
        for (std::size_t c = 0; c < d.channels; ++c) {
          const auto a = d.index(t, i, c), b = d.index(t, j, c);
          if (!mask[a] || !mask[b]) continue;
          const double x = values[a], y = values[b];
          sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
          ++count;
        }
      if (count < 3) continue;
      const double n = static_cast<double>(count);
      const double cov = sxy - sx * sy / n;
      const double vx = sxx - sx * sx / n, vy = syy - sy * sy / n;
      const double r = (vx > 0 && vy > 0) ? std::fabs(cov / std::sqrt(vx * vy)) : 0.0;
      g.adjacency[i * d.nodes + j] = g.adjacency[j * d.nodes + i] = std::min(r, 1.0);
    }
  return g;
}

/// Ring topology distances: min(|i-j|, N-|i-j|).
inline std::vector<double> ring_distances(std::size_t nodes) {
  std::vector<double> d(nodes * nodes);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = 0; j < nodes; ++j) {
      const std::size_t k = i > j ? i - j : j - i;
      d[i * nodes + j] = static_cast<double>(std::min(k, nodes - k));
    }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t nodes = 8;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  double amplitude = 2.0;   // main daily sinusoid amplitude
  double period = 24.0;
  double noise_std = 1.0;   // stationary std of the AR(1) component before smoothing
  double ar = 0.3;          // AR(1) coefficient
};

/// Ring-graph correlated series: shared sinusoids with node phase offsets
/// (neighbours nearly in phase) plus AR(1) noise whose innovations are summed
/// over each node's ring neighbourhood. The raw mask is complete.
/// |x - level_n| <= 1.5 * amplitude + 6 * noise_std * sqrt(3) up to tail events.
inline Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.nodes < 1 || cfg.steps < 1) throw std::invalid_argument("synth_dataset: empty shape");
  Rng rng(cfg.seed);
  Dataset ds;
  ds.dims = Dims{cfg.steps, cfg.nodes, 1};
  ds.values.assign(ds.dims.size(), 0.0);
  ds.mask.assign(ds.dims.size(), 1);
  ds.graph = adjacency_gaussian(ring_distances(cfg.nodes), cfg.nodes, 0.1, 1.0);
  for (std::size_t n = 0; n < cfg.nodes; ++n) ds.graph.labels.push_back("node_" + std::to_string(n));
  ds.split = chronological_split(cfg.steps);

  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> level(cfg.nodes), phase(cfg.nodes);
  for (std::size_t n = 0; n < cfg.nodes; ++n) {
    level[n] = 10.0 + 0.5 * static_cast<double>(n);
    phase[n] = two_pi * static_cast<double>(n) / static_cast<double>(cfg.nodes);
  }
  const double innovation = cfg.noise_std * std::sqrt(1.0 - cfg.ar * cfg.ar);
  std::vector<double> ar_state(cfg.nodes, 0.0), white(cfg.nodes);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    for (auto& w : white) w = rng.normal();
    const double tt = static_cast<double>(t);
    for (std::size_t n = 0; n < cfg.nodes; ++n) {
      double smoothed = white[n];
      double norm = 1.0;
      for (std::size_t j = 0; j < cfg.nodes; ++j) {
        if (ds.graph.at(n, j) > 0.0) {
          smoothed += white[j];
          norm += 1.0;
        }
      }
      smoothed /= std::sqrt(norm);
      ar_state[n] = cfg.ar * ar_state[n] + innovation * smoothed;
      const double seasonal = cfg.amplitude * std::sin(two_pi * tt / cfg.period + phase[n]) +
                              0.5 * cfg.amplitude * std::sin(2.0 * two_pi * tt / cfg.period + 2.0 * phase[n]);
      ds.values[ds.dims.index(t, n, 0)] = level[n] + seasonal + ar_state[n];
    }
  }
  return ds;
}

inline Dataset synth_dataset(std::size_t nodes, std::size_t steps, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.nodes = nodes;
  cfg.steps = steps;
  cfg.seed = seed;
  return synth_dataset(cfg);
}

// ---------------------------------------------------------------------------
// Windowing and normalization
// ---------------------------------------------------------------------------

/// Consecutive windows of length L over rows [begin, end) at the given stride;
/// a trailing partial window is dropped. cond = observed, eval empty.
inline std::vector<Window> windowize(const Dataset& ds, std::size_t length, std::size_t stride, std::size_t begin,
                                     std::size_t end) {
  if (length == 0 || stride == 0) throw std::invalid_argument("windowize: length and stride must be positive");
  std::vector<Window> out;
  const Dims& d = ds.dims;
  for (std::size_t s = begin; s + length <= end; s += stride) {
    Window w;
    w.dims = Dims{length, d.nodes, d.channels};
    const std::size_t row = d.nodes * d.channels;
    w.values.assign(ds.values.begin() + static_cast<std::ptrdiff_t>(s * row),
                    ds.values.begin() + static_cast<std::ptrdiff_t>((s + length) * row));
    w.observed.assign(ds.mask.begin() + static_cast<std::ptrdiff_t>(s * row),
                      ds.mask.begin() + static_cast<std::ptrdiff_t>((s + length) * row));
    for (std::size_t i = 0; i < w.values.size(); ++i)
      if (!w.observed[i]) w.values[i] = 0.0;
    w.cond = w.observed;
    w.eval.assign(w.observed.size(), 0);
    w.start = s;
    out.push_back(std::move(w));
  }
  return out;
}

inline std::vector<Window> windowize(const Dataset& ds, std::size_t length, std::size_t stride) {
  return windowize(ds, length, stride, 0, ds.dims.steps);
}

/// Per (node, channel) standardization fitted on observed training rows.
struct Normalizer {
  std::vector<double> mean;  // nodes * channels
  std::vector<double> std;

  static Normalizer fit(const Dataset& ds, std::size_t rows_end) {
    const Dims& d = ds.dims;
    Normalizer z;
    const std::size_t width = d.nodes * d.channels;
    z.mean.assign(width, 0.0);
    z.std.assign(width, 1.0);
    for (std::size_t k = 0; k < width; ++k) {
      double s = 0, ss = 0;
      std::size_t count = 0;
      for (std::size_t t = 0; t < rows_end; ++t) {
        const std::size_t i = t * width + k;
        if (!ds.mask[i]) continue;
        s += ds.values[i];
        ss += ds.values[i] * ds.values[i];
        ++count;
      }
      if (count == 0) continue;
      const double mu = s / static_cast<double>(count);
      const double var = std::max(0.0, ss / static_cast<double>(count) - mu * mu);
      z.mean[k] = mu;
      z.std[k] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return z;
  }

  /// Standardizes observed cells; missing cells stay 0.
  Window apply(Window w) const {
    const std::size_t width = mean.size();
    for (std::size_t i = 0; i < w.values.size(); ++i)
      w.values[i] = w.observed[i] ? (w.values[i] - mean[i % width]) / std[i % width] : 0.0;
    return w;
  }

  std::vector<double> invert(const std::vector<double>& standardized) const {
    const std::size_t width = mean.size();
    std::vector<double> out(standardized.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = standardized[i] * std[i % width] + mean[i % width];
    return out;
  }
};

/// Windowed real missingness patterns of the training rows.
inline std::vector<Mask> historical_bank(const Dataset& ds, std::size_t length) {
  std::vector<Mask> bank;
  for (auto& w : windowize(ds, length, length, 0, ds.split.train_end)) bank.push_back(std::move(w.observed));
  return bank;
}

}  // namespace costi
