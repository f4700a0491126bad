#pragma once

// Noise-level mathematics: the Karras sigma grid, the consistency-model
// scalings, the loss weighting, the Pseudo-Huber metric, the discrete
// lognormal noise-level sampler and curriculum schedules for the grid size.
//
// Grid indices are 0-based in code: grid[0] == sigma_min, grid[N-1] == sigma_max,
// and a noise-level pair index i in [0, N-2] refers to (grid[i], grid[i+1]).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "costi/ops.hpp"
#include "costi/rng.hpp"
#include "costi/special.hpp"

namespace costi {

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  double sigma_data = 0.5;
  std::size_t n = 200;

  void validate() const {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) {
      throw std::invalid_argument("noise schedule requires 0 < sigma_min < sigma_max");
    }
    if (!(rho > 0.0)) throw std::invalid_argument("noise schedule requires rho > 0");
    if (!(sigma_data > 0.0)) throw std::invalid_argument("noise schedule requires sigma_data > 0");
    if (n < 2) throw std::invalid_argument("noise schedule requires N >= 2, got " + std::to_string(n));
  }

  NoiseSchedule with_n(std::size_t grid_size) const {
    NoiseSchedule s = *this;
    s.n = grid_size;
    return s;
  }
};

/// sigma_i = (sigma_min^(1/rho) + i/(N-1) * (sigma_max^(1/rho) - sigma_min^(1/rho)))^rho
/// for i = 0..N-1. The endpoints are stored exactly.
inline std::vector<double> sigma_grid(const NoiseSchedule& s) {
  s.validate();
  const double lo = std::pow(s.sigma_min, 1.0 / s.rho);
  const double hi = std::pow(s.sigma_max, 1.0 / s.rho);
  std::vector<double> grid(s.n);
  for (std::size_t i = 0; i < s.n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(s.n - 1);
    grid[i] = std::pow(lo + frac * (hi - lo), s.rho);
  }
  grid.front() = s.sigma_min;
  grid.back() = s.sigma_max;
  return grid;
}

struct Scalings {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

/// Boundary-respecting scalings:
///   c_skip = sd^2 / ((s - smin)^2 + sd^2)
///   c_out  = sd (s - smin) / sqrt(sd^2 + s^2)
///   c_in   = 1 / sqrt(s^2 + sd^2)
///   c_noise = ln(s) / 4
/// c_skip(smin) == 1 and c_out(smin) == 0 exactly.
inline Scalings scalings(double sigma, const NoiseSchedule& s) {
  if (!(sigma >= s.sigma_min && sigma <= s.sigma_max)) {
    throw std::out_of_range("sigma " + std::to_string(sigma) + " outside [" + std::to_string(s.sigma_min) + ", " +
                            std::to_string(s.sigma_max) + "]");
  }
  const double sd2 = s.sigma_data * s.sigma_data;
  const double shifted = sigma - s.sigma_min;
  return Scalings{
      sd2 / (shifted * shifted + sd2),
      s.sigma_data * shifted / std::sqrt(sd2 + sigma * sigma),
      1.0 / std::sqrt(sigma * sigma + sd2),
      std::log(sigma) / 4.0,
  };
}

/// lambda(sigma_i) = 1 / (sigma_{i+1} - sigma_i) for pair index i in [0, N-2].
inline double loss_weight(std::size_t i, std::span<const double> grid) {
  if (i + 1 >= grid.size()) {
    throw std::out_of_range("loss_weight: index " + std::to_string(i) + " has no successor in a grid of " +
                            std::to_string(grid.size()));
  }
  return 1.0 / (grid[i + 1] - grid[i]);
}

/// Pseudo-Huber constant c = coefficient * sqrt(D) for D elements per sample.
inline double pseudo_huber_constant(std::size_t elements, double coefficient = 0.00054) {
  return coefficient * std::sqrt(static_cast<double>(elements));
}

/// Elementwise Pseudo-Huber residual sqrt((x - y)^2 + c^2) - c.
template <typename T>
Tensor<T> pseudo_huber_elementwise(const Tensor<T>& x, const Tensor<T>& y, double c) {
  if (x.shape() != y.shape()) {
    throw ShapeError("pseudo_huber: shapes " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  }
  if (!(c > 0.0)) throw std::invalid_argument("pseudo_huber: c must be positive");
  const T cc = static_cast<T>(c);
  return add_scalar(sqrt(add_scalar(square(sub(x, y)), cc * cc)), -cc);
}

/// Pseudo-Huber distance over the whole tensor: sqrt(||x - y||^2 + c^2) - c.
template <typename T>
Tensor<T> pseudo_huber(const Tensor<T>& x, const Tensor<T>& y, double c) {
  if (x.shape() != y.shape()) {
    throw ShapeError("pseudo_huber: shapes " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  }
  if (!(c > 0.0)) throw std::invalid_argument("pseudo_huber: c must be positive");
  const T cc = static_cast<T>(c);
  return add_scalar(sqrt(add_scalar(sum(square(sub(x, y))), cc * cc)), -cc);
}

/// Discrete lognormal distribution over noise-level pairs:
///   p(i) ∝ erf((ln s_{i+1} - P_mean) / (sqrt2 P_std)) - erf((ln s_i - P_mean) / (sqrt2 P_std)).
class NoiseLevelSampler {
 public:
  NoiseLevelSampler(std::span<const double> grid, double p_mean = -1.1, double p_std = 2.0) {
    if (grid.size() < 2) throw std::invalid_argument("noise level sampler needs a grid of size >= 2");
    const double denom = std::numbers::sqrt2 * p_std;
    weights_.resize(grid.size() - 1);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
      weights_[i] = erf((std::log(grid[i + 1]) - p_mean) / denom) - erf((std::log(grid[i]) - p_mean) / denom);
      total += weights_[i];
    }
    cumulative_.resize(weights_.size());
    double run = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      weights_[i] /= total;
      run += weights_[i];
      cumulative_[i] = run;
    }
    cumulative_.back() = 1.0;
  }

  const std::vector<double>& weights() const { return weights_; }

  /// Inverse-CDF draw of a pair index in [0, N-2].
  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const auto i = static_cast<std::size_t>(it - cumulative_.begin());
    return std::min(i, weights_.size() - 1);
  }

 private:
  std::vector<double> weights_;
  std::vector<double> cumulative_;
};

inline std::size_t sample_noise_level(std::span<const double> grid, Rng& rng, double p_mean = -1.1,
                                      double p_std = 2.0) {
  return NoiseLevelSampler(grid, p_mean, p_std).sample(rng);
}

enum class CurriculumKind { linear, constant, original, exponential, pretrain_exponential };

inline std::string_view to_string(CurriculumKind k) {
  switch (k) {
    case CurriculumKind::linear: return "linear";
    case CurriculumKind::constant: return "constant";
    case CurriculumKind::original: return "original";
    case CurriculumKind::exponential: return "exponential";
    case CurriculumKind::pretrain_exponential: return "pretrain_exponential";
  }
  return "?";
}

inline CurriculumKind parse_curriculum(std::string_view name) {
  for (auto k : {CurriculumKind::linear, CurriculumKind::constant, CurriculumKind::original,
                 CurriculumKind::exponential, CurriculumKind::pretrain_exponential}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown curriculum kind '" + std::string(name) + "'");
}

struct CurriculumSchedule {
  CurriculumKind kind = CurriculumKind::linear;
  std::size_t s0 = 10;
  std::size_t s1 = 200;
  std::size_t total_steps = 1;
  double pretrain_fraction = 1.0 / 3.0;
};

namespace detail {

// s0 * 2^floor(k / K') capped at s1, with K' = floor(K / (log2(s1/s0) + 1)).
inline std::size_t exponential_n(std::size_t k, std::size_t total, std::size_t s0, std::size_t s1) {
  if (total == 0) return s1;
  const double doublings = std::log2(static_cast<double>(s1) / static_cast<double>(s0)) + 1.0;
  const auto period = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(total) / doublings)));
  const std::size_t exponent = k / period;
  if (exponent >= 63) return s1;
  const std::size_t n = s0 << exponent;
  return n / (std::size_t{1} << exponent) == s0 ? std::min(n, s1) : s1;
}

}  // namespace detail

/// Grid size N(k) at training step k in [0, K].
///   linear:               s0 + floor((s1 - s0) k / K)
///   constant:             s1
///   original:             linear with s0 = 2
///   exponential:          min(s0 2^floor(k/K'), s1), K' = floor(K / (log2(s1/s0) + 1))
///   pretrain_exponential: 2 while k < rK, then exponential over the remaining steps
inline std::size_t curriculum_n(std::size_t k, const CurriculumSchedule& c) {
  const std::size_t total = c.total_steps;
  if (total == 0) throw std::invalid_argument("curriculum requires total_steps >= 1");
  if (k > total) {
    throw std::out_of_range("curriculum step " + std::to_string(k) + " exceeds total " + std::to_string(total));
  }
  if (c.s0 < 2 || c.s1 < c.s0) throw std::invalid_argument("curriculum requires 2 <= s0 <= s1");
  auto linear = [&](std::size_t s0) {
    return s0 + static_cast<std::size_t>((static_cast<unsigned __int128>(c.s1 - s0) * k) / total);
  };
  switch (c.kind) {
    case CurriculumKind::linear: return linear(c.s0);
    case CurriculumKind::constant: return c.s1;
    case CurriculumKind::original: return linear(2);
    case CurriculumKind::exponential: return detail::exponential_n(k, total, c.s0, c.s1);
    case CurriculumKind::pretrain_exponential: {
      const double boundary = c.pretrain_fraction * static_cast<double>(total);
      if (static_cast<double>(k) < boundary) return 2;
      const auto start = static_cast<std::size_t>(std::ceil(boundary));
      return detail::exponential_n(k - start, total - start, c.s0, c.s1);
    }
  }
  return c.s1;
}

}  // namespace costi
