#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "costi/tensor.hpp"

namespace costi {

/// Result of comparing reverse-mode gradients with central differences.
struct GradCheckResult {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;  // max_abs_error / max(|analytic|_inf, |numeric|_inf)
  std::vector<double> analytic;
  std::vector<double> numeric;
};

namespace detail {

inline GradCheckResult summarize(std::vector<double> analytic, std::vector<double> numeric) {
  GradCheckResult r;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    r.max_abs_error = std::max(r.max_abs_error, std::fabs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::fabs(analytic[i]), std::fabs(numeric[i])});
  }
  r.max_rel_error = scale > 0.0 ? r.max_abs_error / scale : r.max_abs_error;
  r.analytic = std::move(analytic);
  r.numeric = std::move(numeric);
  return r;
}

template <typename T, typename F>
std::vector<double> analytic_gradient(F&& f, const std::vector<T>& values, const Shape& shape) {
  Tape<T> tape;
  Tensor<T> x(shape, values, true);
  Tensor<T> y = f(x);
  tape.backward(y);
  if (!x.has_grad()) return std::vector<double>(values.size(), 0.0);
  return {x.grad().begin(), x.grad().end()};
}

template <typename F>
std::vector<double> central_differences(F&& f, const std::vector<double>& values, const Shape& shape, double h) {
  std::vector<double> out(values.size());
  std::vector<double> probe = values;
  for (std::size_t i = 0; i < values.size(); ++i) {
    probe[i] = values[i] + h;
    const double up = f(Tensor<double>(shape, probe)).item();
    probe[i] = values[i] - h;
    const double down = f(Tensor<double>(shape, probe)).item();
    probe[i] = values[i];
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace detail

/// Compares backward() of scalar-valued `f` at `x` against the central
/// difference (f(x+h) - f(x-h)) / 2h evaluated per element in 64-bit.
/// The error is relative to the largest gradient magnitude.
template <typename F>
GradCheckResult grad_check(F&& f, const Tensor<double>& x, double h = 1e-6) {
  const auto values = x.to_vector();
  auto analytic = detail::analytic_gradient<double>(f, values, x.shape());
  auto numeric = detail::central_differences(
      [&](const Tensor<double>& t) {
        typename Tape<double>::Pause pause;
        return f(t);
      },
      values, x.shape(), h);
  return detail::summarize(std::move(analytic), std::move(numeric));
}

/// Mixed-precision variant: `f` must be generic over the scalar type. The
/// analytic gradient is taken in 32-bit, the reference differences in 64-bit.
template <typename F>
GradCheckResult grad_check_f32(F&& f, const Tensor<double>& x, double h = 1e-6) {
  const auto values = x.to_vector();
  std::vector<float> values32(values.begin(), values.end());
  auto analytic = detail::analytic_gradient<float>([&](const Tensor<float>& t) { return f(t); }, values32, x.shape());
  std::vector<double> rounded(values32.begin(), values32.end());
  auto numeric = detail::central_differences(
      [&](const Tensor<double>& t) {
        typename Tape<double>::Pause pause;
        return f(t);
      },
      rounded, x.shape(), h);
  return detail::summarize(std::move(analytic), std::move(numeric));
}

}  // namespace costi
