#pragma once

// Few-step conditional sampling, ensemble median and observed-value merging.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "costi/data.hpp"
#include "costi/network.hpp"
#include "costi/rng.hpp"
#include "costi/schedule.hpp"

namespace costi {

struct SamplerConfig {
  std::vector<double> sigmas{80.0};  // strictly decreasing
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  std::size_t batch = 16;    // ensemble members evaluated per forward pass
  std::size_t threads = 1;

  void validate(const NoiseSchedule& s) const {
    if (n_samples < 1) throw std::invalid_argument("sampler: n_samples must be >= 1");
    if (sigmas.empty()) throw std::invalid_argument("sampler: empty sigma sequence");
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      if (!(sigmas[i] >= s.sigma_min && sigmas[i] <= s.sigma_max))
        throw std::invalid_argument("sampler: sigma " + std::to_string(sigmas[i]) + " outside the schedule range");
      if (i > 0 && !(sigmas[i] < sigmas[i - 1]))
        throw std::invalid_argument("sampler: sigma sequence must be strictly decreasing");
    }
    if (batch < 1 || threads < 1) throw std::invalid_argument("sampler: batch and threads must be >= 1");
  }
};

/// Forward passes needed by a sampler configuration (per window).
inline std::size_t count_forward_passes(const SamplerConfig& c) { return c.n_samples * c.sigmas.size(); }

/// T noise levels spaced geometrically from sigma_max down to sigma_min.
inline std::vector<double> geometric_sigmas(std::size_t steps, double sigma_max = 80.0, double sigma_min = 0.002) {
  if (steps < 1) throw std::invalid_argument("geometric_sigmas: steps must be >= 1");
  std::vector<double> s(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(steps - 1);
    s[k] = sigma_max * std::pow(sigma_min / sigma_max, frac);
  }
  s.front() = sigma_max;
  if (steps > 1) s.back() = sigma_min;
  return s;
}

struct Preset {
  std::string_view name;
  double sigma2;
  std::size_t window;
  std::size_t f_t;
  std::size_t f_s;
  std::size_t epochs;
  std::size_t ddpm_steps;
};

/// Per-dataset settings: second-step noise level, window length, compression
/// factors, training epochs and the diffusion step count used for cost emulation.
inline constexpr Preset kPresets[] = {
    {"aqi-36", 20.92, 36, 2, 2, 200, 100},          {"metr-la-block", 0.621, 24, 2, 9, 300, 50},
    {"metr-la-point", 0.821, 24, 1, 9, 300, 50},    {"pems-bay-block", 1.526, 24, 2, 5, 150, 50},
    {"pems-bay-point", 5.23, 24, 1, 5, 150, 50},    {"physionet-2019", 20.92, 48, 2, 2, 50, 50},
    {"etth1", 0.621, 24, 1, 1, 200, 50},            {"pems08", 0.621, 24, 2, 2, 50, 50},
};

inline const Preset& find_preset(std::string_view name) {
  for (const auto& p : kPresets)
    if (p.name == name) return p;
  throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

/// Sigma sequence for 1 or 2 steps: {sigma_max} or {sigma_max, sigma2}.
inline std::vector<double> preset_sigmas(const Preset& p, std::size_t steps, double sigma_max = 80.0) {
  if (steps == 1) return {sigma_max};
  if (steps == 2) return {sigma_max, p.sigma2};
  throw std::invalid_argument("presets define 1 or 2 sampling steps");
}

/// Element-wise median; an even count takes the midpoint of the middle pair.
inline std::vector<double> elementwise_median(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw std::invalid_argument("median of an empty sample set");
  const std::size_t n = samples.size(), len = samples[0].size();
  std::vector<double> out(len), column(n);
  for (std::size_t j = 0; j < len; ++j) {
    for (std::size_t s = 0; s < n; ++s) column[s] = samples[s][j];
    const auto mid = column.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(column.begin(), mid, column.end());
    if (n % 2 == 1) {
      out[j] = *mid;
    } else {
      const double upper = *mid;
      const double lower = *std::max_element(column.begin(), mid);
      out[j] = 0.5 * (lower + upper);
    }
  }
  return out;
}

/// Model-side view of a window to impute (standardized values).
struct ImputationTask {
  Dims dims;
  std::vector<double> visible;  // values * cond
  std::vector<double> interp;   // linear interpolation of `visible`
  Mask cond;
};

inline ImputationTask make_task(const Window& w) {
  ImputationTask t;
  t.dims = w.dims;
  t.visible = visible_values(w);
  t.interp = linear_interpolate(t.visible, w.cond, w.dims);
  t.cond = w.cond;
  return t;
}

struct ImputationResult {
  std::vector<std::vector<double>> samples;
  std::vector<double> deterministic;
  std::vector<double> merged;  // visible values restored
};

namespace detail {

struct SampleJob {
  const ImputationTask* task;
  std::uint64_t seed;
  std::vector<double>* out;
};

/// Runs the full sigma sequence for a group of jobs sharing one graph and shape.
template <typename T>
void run_sample_jobs(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                     const Tensor<T>& adjacency, const std::vector<double>& sigmas, SampleJob* jobs,
                     std::size_t count) {
  typename Tape<T>::Pause no_grad;
  const Dims d = jobs[0].task->dims;
  const std::size_t cells = d.size();
  std::vector<Rng> rngs;
  rngs.reserve(count);
  for (std::size_t j = 0; j < count; ++j) rngs.emplace_back(jobs[j].seed);
  std::vector<T> interp(count * cells), cond(count * cells), current(count * cells);
  for (std::size_t j = 0; j < count; ++j) {
    const auto& t = *jobs[j].task;
    for (std::size_t i = 0; i < cells; ++i) {
      interp[j * cells + i] = static_cast<T>(t.interp[i]);
      cond[j * cells + i] = t.cond[i] ? T(1) : T(0);
      current[j * cells + i] = static_cast<T>(t.visible[i]);
    }
  }
  const Shape shape{count, d.steps, d.nodes, d.channels};
  ModelInput<T> in;
  in.interp = Tensor<T>(shape, interp);
  in.cond_mask = Tensor<T>(shape, cond);
  in.adjacency = adjacency;
  ForwardContext ctx;
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    std::vector<T> noisy(count * cells);
    for (std::size_t j = 0; j < count; ++j) {
      const auto& t = *jobs[j].task;
      for (std::size_t i = 0; i < cells; ++i) {
        const std::size_t idx = j * cells + i;
        // re-inject the visible values before re-noising
        const double base = (k > 0 && !t.cond[i]) ? static_cast<double>(current[idx]) : t.visible[i];
        noisy[idx] = static_cast<T>(base + sigmas[k] * rngs[j].normal());
      }
    }
    in.x_noisy = Tensor<T>(shape, std::move(noisy));
    in.sigma.assign(count, sigmas[k]);
    Tensor<T> out = model.consistency_forward(params, in, schedule, ctx);
    current = out.to_vector();
  }
  for (std::size_t j = 0; j < count; ++j) {
    auto& dst = *jobs[j].out;
    dst.resize(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      const double v = static_cast<double>(current[j * cells + i]);
      if (!std::isfinite(v)) throw NumericError("sampling produced a non-finite value");
      dst[i] = v;
    }
  }
}

template <typename T>
void run_jobs(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
              const Tensor<T>& adjacency, const SamplerConfig& cfg, std::vector<SampleJob>& jobs) {
  const std::size_t chunks = (jobs.size() + cfg.batch - 1) / cfg.batch;
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t c = first; c < chunks; c += stride) {
      const std::size_t begin = c * cfg.batch;
      const std::size_t count = std::min(cfg.batch, jobs.size() - begin);
      run_sample_jobs(model, params, schedule, adjacency, cfg.sigmas, jobs.data() + begin, count);
    }
  };
  const std::size_t threads = std::min(cfg.threads, chunks);
  if (threads <= 1) {
    work(0, 1);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Seed of ensemble member `member` of window `window` under run seed `seed`.
inline std::uint64_t member_seed(std::uint64_t seed, std::size_t window, std::size_t member) {
  return derive_seed(derive_seed(seed, window), member);
}

/// One stochastic imputation following the sigma sequence.
template <typename T>
std::vector<double> sample_once(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                                const ImputationTask& task, const Tensor<T>& adjacency,
                                const std::vector<double>& sigmas, std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.sigmas = sigmas;
  cfg.n_samples = 1;
  cfg.validate(schedule);
  if (!params.all_finite()) throw NumericError("model parameters contain non-finite values");
  std::vector<double> out;
  detail::SampleJob job{&task, seed, &out};
  detail::run_sample_jobs(model, params, schedule, adjacency, sigmas, &job, 1);
  return out;
}

inline std::vector<double> merge_visible(const ImputationTask& task, const std::vector<double>& pred) {
  std::vector<double> merged(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) merged[i] = task.cond[i] ? task.visible[i] : pred[i];
  return merged;
}

/// Imputes several windows, each with an ensemble of cfg.n_samples members.
template <typename T>
std::vector<ImputationResult> impute_many(const Model<T>& model, const ParamStore<T>& params,
                                          const NoiseSchedule& schedule, const std::vector<ImputationTask>& tasks,
                                          const Tensor<T>& adjacency, const SamplerConfig& cfg,
                                          bool keep_samples = true) {
  cfg.validate(schedule);
  if (!params.all_finite()) throw NumericError("model parameters contain non-finite values");
  for (const auto& t : tasks)
    if (!(t.dims == tasks.front().dims)) throw ShapeError("impute: all windows must share one shape");
  std::vector<ImputationResult> results(tasks.size());
  for (auto& r : results) r.samples.resize(cfg.n_samples);
  std::vector<detail::SampleJob> jobs;
  jobs.reserve(tasks.size() * cfg.n_samples);
  for (std::size_t w = 0; w < tasks.size(); ++w)
    for (std::size_t m = 0; m < cfg.n_samples; ++m)
      jobs.push_back({&tasks[w], member_seed(cfg.seed, w, m), &results[w].samples[m]});
  detail::run_jobs(model, params, schedule, adjacency, cfg, jobs);
  for (std::size_t w = 0; w < tasks.size(); ++w) {
    auto& r = results[w];
    r.deterministic = elementwise_median(r.samples);
    r.merged = merge_visible(tasks[w], r.deterministic);
    if (!keep_samples) r.samples.clear();
  }
  return results;
}

template <typename T>
ImputationResult impute(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                        const ImputationTask& task, const Tensor<T>& adjacency, const SamplerConfig& cfg) {
  return std::move(impute_many(model, params, schedule, {task}, adjacency, cfg).front());
}

}  // namespace costi
