#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clmex/tensor.hpp"

namespace clmex {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled: p <- p - lr * weight_decay * p, outside the moment estimates.
  double weight_decay = 0.0;
};

struct AdamState {
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  AdamOptions options;
};

/// One bias-corrected Adam update over parallel lists of parameter and gradient
/// buffers. Rejects the whole step, leaving everything untouched, if any
/// gradient is non-finite.
inline void adam_step(std::span<const std::span<double>> params,
                      std::span<const std::span<const double>> grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step", Shape{params.size()}, Shape{grads.size()});
  }
  if (!(lr >= 0.0)) throw std::invalid_argument("adam_step: learning rate must be >= 0");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step", Shape{state.first_moment.size()}, Shape{params.size()});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.first_moment[i].size() != params[i].size() ||
        state.second_moment[i].size() != params[i].size()) {
      throw ShapeError("adam_step", Shape{params[i].size()}, Shape{grads[i].size()});
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw NumericalError("adam_step: non-finite gradient in parameter " + std::to_string(i) +
                             " element " + std::to_string(j) + " at step " +
                             std::to_string(state.step_count + 1));
      }
    }
  }

  const auto& o = state.options;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      double& p = params[i][j];
      p -= lr * o.weight_decay * p;
      p -= lr * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
  }
}

/// Adam bound to a fixed list of tensors; gradients are read from the tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)) {
    state_.options = options;
  }

  void step(double lr) {
    std::vector<std::span<double>> values;
    std::vector<std::span<const double>> grads;
    std::vector<std::vector<double>> zero_grads;
    zero_grads.reserve(params_.size());
    for (auto& p : params_) {
      values.push_back(p.mutable_values());
      if (p.has_grad()) {
        grads.push_back(p.grad());
      } else {
        zero_grads.emplace_back(p.size(), 0.0);
        grads.push_back(zero_grads.back());
      }
    }
    adam_step(values, grads, state_, lr);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor>& params() const { return params_; }
  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

enum class ScheduleKind { constant, cosine_decay, plateau_decay };

/// Learning-rate schedule. Cosine schedules are queried by step; plateau
/// schedules are driven by `observe(metric)` once per evaluation.
class LrSchedule {
 public:
  static LrSchedule constant(double base_lr) {
    LrSchedule s;
    s.kind_ = ScheduleKind::constant;
    s.base_lr_ = s.current_lr_ = base_lr;
    return s;
  }

  static LrSchedule cosine(double base_lr, std::uint64_t total_steps) {
    LrSchedule s = constant(base_lr);
    s.kind_ = ScheduleKind::cosine_decay;
    s.total_steps_ = total_steps;
    return s;
  }

  static LrSchedule plateau(double base_lr, double decay_factor, int patience) {
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
      throw std::invalid_argument("plateau schedule: decay factor must lie in (0, 1]");
    }
    if (patience < 0) throw std::invalid_argument("plateau schedule: patience must be >= 0");
    LrSchedule s = constant(base_lr);
    s.kind_ = ScheduleKind::plateau_decay;
    s.decay_factor_ = decay_factor;
    s.patience_ = patience;
    return s;
  }

  ScheduleKind kind() const { return kind_; }
  double base_lr() const { return base_lr_; }
  std::uint64_t total_steps() const { return total_steps_; }
  double decay_factor() const { return decay_factor_; }
  int patience() const { return patience_; }
  const std::vector<double>& history() const { return history_; }
  int bad_evaluations() const { return bad_evaluations_; }

  /// lr for an optimizer step; steps outside [0, total_steps] are clamped.
  double lr_at(std::uint64_t step) const {
    if (kind_ != ScheduleKind::cosine_decay) return current_lr_;
    if (total_steps_ == 0) return base_lr_;
    const double frac = static_cast<double>(std::min(step, total_steps_)) / static_cast<double>(total_steps_);
    return base_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }

  /// Records one evaluation of the monitored metric (lower is better) and
  /// returns the lr to use next. The lr is multiplied by the decay factor once
  /// `patience` consecutive evaluations have failed to improve on the best.
  double observe(double metric) {
    history_.push_back(metric);
    if (kind_ != ScheduleKind::plateau_decay) return current_lr_;
    if (history_.size() == 1 || metric < best_) {
      best_ = metric;
      bad_evaluations_ = 0;
    } else if (++bad_evaluations_ >= patience_) {
      current_lr_ *= decay_factor_;
      bad_evaluations_ = 0;
    }
    return current_lr_;
  }

  double current_lr() const { return current_lr_; }

  /// Restores plateau bookkeeping (checkpoint resume).
  void restore(double current_lr, std::vector<double> history, int bad_evaluations) {
    current_lr_ = current_lr;
    history_ = std::move(history);
    bad_evaluations_ = bad_evaluations;
    best_ = std::numeric_limits<double>::infinity();
    for (double h : history_) best_ = std::min(best_, h);
  }

 private:
  ScheduleKind kind_ = ScheduleKind::constant;
  double base_lr_ = 0.0;
  double current_lr_ = 0.0;
  std::uint64_t total_steps_ = 0;
  double decay_factor_ = 1.0;
  int patience_ = 0;
  std::vector<double> history_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_evaluations_ = 0;
};

}  // namespace clmex
