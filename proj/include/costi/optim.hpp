#pragma once

// Optimizers over a ParamStore: schedule-free AdamW, AdamW with multi-step
// learning-rate drops, and rectified Adam.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "costi/network.hpp"

namespace costi {

enum class OptimizerKind { schedulefree_adamw, adamw_multistep, radam_plain };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::schedulefree_adamw: return "schedulefree_adamw";
    case OptimizerKind::adamw_multistep: return "adamw_multistep";
    case OptimizerKind::radam_plain: return "radam_plain";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view name) {
  for (auto k : {OptimizerKind::schedulefree_adamw, OptimizerKind::adamw_multistep, OptimizerKind::radam_plain})
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::schedulefree_adamw;
  double lr = 2.5e-3;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 1;  // for the multi-step drops

  /// Defaults of each variant: schedule-free 2.5e-3 / wd 1e-6, multi-step
  /// AdamW 1e-3 / wd 1e-6, rectified Adam 1e-4 / no decay.
  static OptimizerConfig defaults(OptimizerKind kind, std::size_t total_steps) {
    OptimizerConfig c;
    c.kind = kind;
    c.total_steps = total_steps;
    if (kind == OptimizerKind::adamw_multistep) c.lr = 1e-3;
    if (kind == OptimizerKind::radam_plain) {
      c.lr = 1e-4;
      c.weight_decay = 0.0;
    }
    return c;
  }
};

template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const ParamStore<T>& params) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (cfg_.weight_decay < 0.0) throw std::invalid_argument("weight decay must be nonnegative");
    const std::size_t n = params.size();
    m_.resize(n);
    v_.resize(n);
    z_.resize(n);
    x_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = params[i].data();
      v_[i].assign(d.size(), 0.0);
      if (cfg_.kind == OptimizerKind::schedulefree_adamw) {
        z_[i].assign(d.begin(), d.end());
        x_[i].assign(d.begin(), d.end());
      } else {
        m_[i].assign(d.size(), 0.0);
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return t_; }

  /// Learning rate in effect for the next step.
  double current_lr() const {
    if (cfg_.kind != OptimizerKind::adamw_multistep) return cfg_.lr;
    const double progress = static_cast<double>(t_) / static_cast<double>(std::max<std::size_t>(1, cfg_.total_steps));
    double lr = cfg_.lr;
    if (progress >= 0.75) lr *= 0.1;
    if (progress >= 0.9) lr *= 0.1;
    return lr;
  }

  /// Applies one update using the gradients stored on the parameters. A
  /// parameter without a gradient buffer is treated as having zero gradient.
  /// Throws NumericError naming the first layer with a non-finite gradient.
  void step(ParamStore<T>& params) {
    check_gradients(params);
    const double lr = current_lr();
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps, wd = cfg_.weight_decay;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto data = p.mutable_leaf_data();
      const auto grad = p.grad();
      auto g = [&](std::size_t j) { return grad.empty() ? 0.0 : static_cast<double>(grad[j]); };
      auto& v = v_[i];
      switch (cfg_.kind) {
        case OptimizerKind::schedulefree_adamw: {
          // params hold y; z is the base sequence, x the running average
          const double c = 1.0 / static_cast<double>(t_);
          auto& z = z_[i];
          auto& x = x_[i];
          for (std::size_t j = 0; j < data.size(); ++j) {
            const double gj = g(j);
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            const double denom = std::sqrt(v[j] / bc2) + eps;
            const double y = static_cast<double>(data[j]);
            z[j] -= lr * (gj / denom + wd * y);
            x[j] = (1.0 - c) * x[j] + c * z[j];
            data[j] = static_cast<T>((1.0 - b1) * z[j] + b1 * x[j]);
          }
          break;
        }
        case OptimizerKind::adamw_multistep: {
          auto& m = m_[i];
          for (std::size_t j = 0; j < data.size(); ++j) {
            const double gj = g(j);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            double w = static_cast<double>(data[j]) * (1.0 - lr * wd);
            w -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
            data[j] = static_cast<T>(w);
          }
          break;
        }
        case OptimizerKind::radam_plain: {
          auto& m = m_[i];
          const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
          const double bt2 = std::pow(b2, static_cast<double>(t_));
          const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * bt2 / (1.0 - bt2);
          const double rect = rho_t > 5.0 ? std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                                      ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                                          : 0.0;
          for (std::size_t j = 0; j < data.size(); ++j) {
            const double gj = g(j);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            double w = static_cast<double>(data[j]) * (1.0 - lr * wd);
            const double mhat = m[j] / bc1;
            if (rho_t > 5.0) {
              w -= lr * mhat * rect * std::sqrt(bc2) / (std::sqrt(v[j]) + eps);
            } else {
              w -= lr * mhat;
            }
            data[j] = static_cast<T>(w);
          }
          break;
        }
      }
    }
  }

  /// Parameters to use for evaluation: the averaged iterate x for the
  /// schedule-free method, the current parameters otherwise.
  ParamStore<T> eval_params(const ParamStore<T>& params) const {
    ParamStore<T> out = params.clone();
    if (cfg_.kind != OptimizerKind::schedulefree_adamw) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::vector<T> x(x_[i].begin(), x_[i].end());
      out[i].assign(x);
    }
    return out;
  }

  /// Base sequence z of the schedule-free method (empty for other kinds).
  const std::vector<double>& z(std::size_t i) const { return z_[i]; }

 private:
  void check_gradients(const ParamStore<T>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (auto gv : params[i].grad())
        if (!std::isfinite(static_cast<double>(gv)))
          throw NumericError("non-finite gradient in layer '" + params.path(i) + "'");
  }

  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_, z_, x_;
};

}  // namespace costi
