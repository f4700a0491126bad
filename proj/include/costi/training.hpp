#pragma once

// Masked consistency training: coupled noisy pairs, the stopgrad-teacher loss,
// curriculum over the grid size, optimizer steps, validation and model selection.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "costi/data.hpp"
#include "costi/network.hpp"
#include "costi/optim.hpp"
#include "costi/rng.hpp"
#include "costi/sampling.hpp"
#include "costi/schedule.hpp"

namespace costi {

/// Standardized windows of each split plus everything needed to undo the scaling.
struct PreparedData {
  Dims dims;  // one window
  Graph graph;
  Normalizer normalizer;
  std::vector<Window> train, val, test;
  std::vector<Mask> bank;
};

inline PreparedData prepare_data(const Dataset& ds, std::size_t window, std::size_t train_stride = 1) {
  if (ds.split.train_end < window || ds.split.val_end < ds.split.train_end || ds.dims.steps < ds.split.val_end)
    throw DataError("dataset splits are too short for window length " + std::to_string(window));
  PreparedData p;
  p.dims = Dims{window, ds.dims.nodes, ds.dims.channels};
  p.graph = ds.graph;
  p.normalizer = Normalizer::fit(ds, ds.split.train_end);
  auto standardize = [&](std::vector<Window> ws) {
    for (auto& w : ws) w = p.normalizer.apply(std::move(w));
    return ws;
  };
  p.train = standardize(windowize(ds, window, train_stride, 0, ds.split.train_end));
  p.val = standardize(windowize(ds, window, window, ds.split.train_end, ds.split.val_end));
  p.test = standardize(windowize(ds, window, window, ds.split.val_end, ds.dims.steps));
  if (p.train.empty()) throw DataError("no training windows");
  p.bank = historical_bank(ds, window);
  return p;
}

/// Same windows with a fixed point mask of `rate` over the observed cells.
inline std::vector<Window> with_point_mask(std::vector<Window> ws, double rate, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& w : ws) set_cond_mask(w, mask_point(w.observed, rate, rate, rng));
  return ws;
}

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t total_steps = 1000;
  OptimizerKind optimizer = OptimizerKind::schedulefree_adamw;
  double learning_rate = 2.5e-3;
  double weight_decay = 1e-6;
  CurriculumSchedule curriculum{};
  MaskStrategy mask_strategy = MaskStrategy::point;
  BlockMaskConfig block{};
  NoiseSchedule schedule{};
  double pseudo_huber_coef = 0.00054;
  double p_mean = -1.1;
  double p_std = 2.0;
  std::uint64_t seed = 0;
  std::size_t val_every = 0;  // 0: max(1, K / 50)
  double val_point_rate = 0.25;
  std::size_t val_samples = 4;
  std::vector<double> val_sigmas{80.0};

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be nonnegative");
    if (!(pseudo_huber_coef > 0.0)) throw std::invalid_argument("pseudo_huber_coef must be positive");
    schedule.validate();
  }

  std::size_t validation_interval() const {
    return val_every ? val_every : std::max<std::size_t>(1, total_steps / 50);
  }
};

struct NoisyPair {
  std::vector<double> upper;  // target + sigma_{i+1} eps (student input)
  std::vector<double> lower;  // target + sigma_i eps (teacher input)
  std::vector<double> eps;
};

/// Training target: ground truth at observed cells (visible or synthetically
/// hidden), 0 where the raw data is missing.
inline std::vector<double> training_target(const Window& w) {
  std::vector<double> t(w.values.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = w.observed[i] ? w.values[i] : 0.0;
  return t;
}

/// Both noise levels share a single standard-normal draw.
inline NoisyPair build_noisy_pair(const Window& w, double sigma_i, double sigma_next, Rng& rng) {
  NoisyPair p;
  const auto target = training_target(w);
  p.eps.resize(target.size());
  for (auto& e : p.eps) e = rng.normal();
  p.upper.resize(target.size());
  p.lower.resize(target.size());
  for (std::size_t j = 0; j < target.size(); ++j) {
    p.upper[j] = target[j] + sigma_next * p.eps[j];
    p.lower[j] = target[j] + sigma_i * p.eps[j];
  }
  return p;
}

/// One element of a training batch: a masked window, its pair index and noise.
struct LossItem {
  const Window* window;
  std::size_t index;  // pair (grid[index], grid[index + 1])
  std::vector<double> eps;
};

/// sum(weight * pseudo_huber(student, teacher)); cells of weight 0 contribute
/// exactly nothing whatever their values.
template <typename T>
Tensor<T> masked_pseudo_huber(const Tensor<T>& student, const Tensor<T>& teacher, const Tensor<T>& weight, double c) {
  if (weight.shape() != student.shape()) throw ShapeError("masked_pseudo_huber: weight shape mismatch");
  return sum(mul(pseudo_huber_elementwise(student, teacher, c), weight));
}

/// Batched masked consistency loss:
///   mean over items of lambda(i) * sum_eval d(f(x_{i+1}), f^-(x_i)) / #eval
/// with d the elementwise Pseudo-Huber metric. The teacher is evaluated with
/// gradient recording suspended (stopgrad), using `teacher` parameters, and is
/// replaced by the clean target when sigma_i == sigma_min. Items whose window
/// has no evaluated cell contribute 0.
template <typename T>
Tensor<T> consistency_loss(const Model<T>& model, const ParamStore<T>& student, const ParamStore<T>& teacher,
                           const std::vector<LossItem>& items, const std::vector<double>& grid,
                           const NoiseSchedule& schedule, const Tensor<T>& adjacency, double ph_coef,
                           const ForwardContext& ctx) {
  if (items.empty()) throw std::invalid_argument("consistency_loss: empty batch");
  const Dims d = items.front().window->dims;
  const std::size_t cells = d.size(), b = items.size();
  const Shape shape{b, d.steps, d.nodes, d.channels};
  std::vector<T> upper(b * cells), lower(b * cells), target(b * cells), interp(b * cells), cond(b * cells),
      weight(b * cells, T(0));
  std::vector<double> s_upper(b), s_lower(b);
  for (std::size_t k = 0; k < b; ++k) {
    const auto& it = items[k];
    const Window& w = *it.window;
    if (!(w.dims == d)) throw ShapeError("consistency_loss: windows must share one shape");
    if (it.index + 1 >= grid.size()) throw std::out_of_range("consistency_loss: pair index has no successor");
    if (it.eps.size() != cells) throw ShapeError("consistency_loss: noise size mismatch");
    s_lower[k] = grid[it.index];
    s_upper[k] = grid[it.index + 1];
    const auto tgt = training_target(w);
    const auto interp_k = linear_interpolate(visible_values(w), w.cond, d);
    const std::size_t evaluated = count_set(w.eval);
    const double lam = loss_weight(it.index, grid);
    const double wk = evaluated ? lam / (static_cast<double>(evaluated) * static_cast<double>(b)) : 0.0;
    for (std::size_t j = 0; j < cells; ++j) {
      const std::size_t o = k * cells + j;
      upper[o] = static_cast<T>(tgt[j] + s_upper[k] * it.eps[j]);
      lower[o] = static_cast<T>(tgt[j] + s_lower[k] * it.eps[j]);
      target[o] = static_cast<T>(tgt[j]);
      interp[o] = static_cast<T>(interp_k[j]);
      cond[o] = w.cond[j] ? T(1) : T(0);
      if (w.eval[j]) weight[o] = static_cast<T>(wk);
    }
  }
  ModelInput<T> in;
  in.interp = Tensor<T>(shape, interp);
  in.cond_mask = Tensor<T>(shape, cond);
  in.adjacency = adjacency;

  std::vector<T> teacher_out;
  {
    typename Tape<T>::Pause stopgrad_scope;
    in.x_noisy = Tensor<T>(shape, lower);
    in.sigma = s_lower;
    teacher_out = model.consistency_forward(teacher, in, schedule, ctx).to_vector();
  }
  for (std::size_t k = 0; k < b; ++k)
    if (items[k].index == 0)
      std::copy_n(target.begin() + static_cast<std::ptrdiff_t>(k * cells), cells,
                  teacher_out.begin() + static_cast<std::ptrdiff_t>(k * cells));

  in.x_noisy = Tensor<T>(shape, upper);
  in.sigma = s_upper;
  Tensor<T> student_out = model.consistency_forward(student, in, schedule, ctx);
  const double c = pseudo_huber_constant(d.size(), ph_coef);
  return masked_pseudo_huber(student_out, Tensor<T>(shape, std::move(teacher_out)), Tensor<T>(shape, std::move(weight)),
                             c);
}

/// Single-window loss with a fresh noise draw; teacher == student parameters.
template <typename T>
Tensor<T> consistency_loss(const Model<T>& model, const ParamStore<T>& params, const Window& w, std::size_t i,
                           const std::vector<double>& grid, const NoiseSchedule& schedule, const Graph& graph,
                           Rng& rng, double ph_coef = 0.00054, const ForwardContext& ctx = {}) {
  LossItem item{&w, i, {}};
  item.eps.resize(w.dims.size());
  for (auto& e : item.eps) e = rng.normal();
  return consistency_loss(model, params, params, {item}, grid, schedule, normalized_adjacency<T>(graph), ph_coef,
                          ctx);
}

struct TraceRow {
  std::size_t step;
  std::size_t n;
  double sigma_i;  // mean lower noise level of the batch
  double loss;
  std::optional<double> val_mae;
};

template <typename T>
struct TrainResult {
  ParamStore<T> best;   // evaluation parameters with the lowest validation MAE
  ParamStore<T> last;   // evaluation parameters after the final step
  std::vector<TraceRow> trace;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  double seconds = 0.0;
};

/// Mean absolute error in original units over the eval cells of `windows`
/// after imputation with `cfg`.
template <typename T>
double imputation_mae(const Model<T>& model, const ParamStore<T>& params, const NoiseSchedule& schedule,
                      const std::vector<Window>& windows, const Normalizer& norm, const Tensor<T>& adjacency,
                      const SamplerConfig& cfg) {
  std::vector<ImputationTask> tasks;
  tasks.reserve(windows.size());
  for (const auto& w : windows) tasks.push_back(make_task(w));
  const auto results = impute_many(model, params, schedule, tasks, adjacency, cfg, false);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto truth = norm.invert(windows[k].values);
    const auto pred = norm.invert(results[k].merged);
    for (std::size_t j = 0; j < truth.size(); ++j)
      if (windows[k].eval[j]) {
        total += std::fabs(truth[j] - pred[j]);
        ++count;
      }
  }
  if (count == 0) throw std::invalid_argument("imputation_mae: no evaluated cells");
  return total / static_cast<double>(count);
}

using TrainCallback = std::function<void(const TraceRow&)>;

/// Full training loop. Stream layout of `cfg.seed`: 0 parameter init,
/// 1 batch/mask/noise sampling, 2 dropout, 3 validation masks, 4 validation sampling.
template <typename T>
TrainResult<T> train(const Model<T>& model, const PreparedData& data, const TrainConfig& cfg,
                     const TrainCallback& on_step = {}) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  ParamStore<T> params = model.init_params(derive_seed(cfg.seed, 0));
  OptimizerConfig oc = OptimizerConfig::defaults(cfg.optimizer, cfg.total_steps);
  if (cfg.optimizer == OptimizerKind::schedulefree_adamw) {
    oc.lr = cfg.learning_rate;
    oc.weight_decay = cfg.weight_decay;
  } else if (cfg.optimizer == OptimizerKind::adamw_multistep) {
    oc.weight_decay = cfg.weight_decay;
  }
  Optimizer<T> opt(oc, params);
  Rng rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  const Tensor<T> adjacency = normalized_adjacency<T>(data.graph);
  const auto val_windows = with_point_mask(data.val, cfg.val_point_rate, derive_seed(cfg.seed, 3));
  SamplerConfig vs;
  vs.sigmas = cfg.val_sigmas;
  vs.n_samples = cfg.val_samples;
  vs.seed = derive_seed(cfg.seed, 4);

  CurriculumSchedule cur = cfg.curriculum;
  cur.total_steps = cfg.total_steps;
  const std::size_t interval = cfg.validation_interval();

  TrainResult<T> result;
  std::size_t grid_n = 0;
  std::vector<double> grid;
  std::optional<NoiseLevelSampler> sampler;
  std::vector<Window> batch(cfg.batch_size);
  ForwardContext ctx{true, &dropout_rng};

  for (std::size_t k = 0; k < cfg.total_steps; ++k) {
    const std::size_t n = curriculum_n(k, cur);
    if (n != grid_n) {
      grid_n = n;
      grid = sigma_grid(cfg.schedule.with_n(n));
      sampler.emplace(grid, cfg.p_mean, cfg.p_std);
    }
    std::vector<LossItem> items;
    items.reserve(cfg.batch_size);
    double sigma_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch[b] = data.train[rng.uniform_index(data.train.size())];
      apply_mask_strategy(batch[b], cfg.mask_strategy, data.bank, rng, cfg.block);
      const std::size_t i = sampler->sample(rng);
      LossItem item{&batch[b], i, std::vector<double>(data.dims.size())};
      for (auto& e : item.eps) e = rng.normal();
      sigma_sum += grid[i];
      items.push_back(std::move(item));
    }
    double loss_value = 0.0;
    {
      Tape<T> tape;
      params.zero_grad();
      Tensor<T> loss = consistency_loss(model, params, params, items, grid, cfg.schedule, adjacency,
                                        cfg.pseudo_huber_coef, ctx);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) throw NumericError("non-finite loss at step " + std::to_string(k));
      tape.backward(loss);
    }
    opt.step(params);

    TraceRow row{k, n, sigma_sum / static_cast<double>(cfg.batch_size), loss_value, std::nullopt};
    const bool last = k + 1 == cfg.total_steps;
    if (!data.val.empty() && ((k + 1) % interval == 0 || last)) {
      ParamStore<T> eval = opt.eval_params(params);
      const double mae = imputation_mae(model, eval, cfg.schedule, val_windows, data.normalizer, adjacency, vs);
      row.val_mae = mae;
      if (mae < result.best_val_mae) {
        result.best_val_mae = mae;
        result.best_step = k + 1;
        result.best = std::move(eval);
      }
    }
    if (on_step) on_step(row);
    result.trace.push_back(row);
  }
  result.last = opt.eval_params(params);
  if (result.best.size() == 0) result.best = result.last.clone();
  result.best.set_seed(derive_seed(cfg.seed, 0));
  result.last.set_seed(derive_seed(cfg.seed, 0));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace costi
