// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "layalign/tensor.hpp"

namespace layalign {

struct AdamConfig {
  double learning_rate = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double warmup_ratio = 0.05;
  std::size_t total_steps = 0;
  double clip_norm = 0.0;  // <= 0 disables global-norm clipping
};

/// ceil(warmup_ratio * total_steps).
std::size_t warmup_steps(const AdamConfig& config);

/// Learning rate used by 0-based update `step`: linear ramp lr*(step+1)/W over
/// the first W steps, constant afterwards.
double scheduled_learning_rate(const AdamConfig& config, std::size_t step);

template <class T>
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

template <class T>
class Adam {
 public:
  /// `lr_scale`, when given, multiplies the scheduled rate per parameter.
  Adam(AdamConfig config, std::vector<Tensor<T>> params, std::vector<double> lr_scale = {});

  /// Bias-corrected update from the parameters' accumulated gradients.
  /// Parameters with no gradient are skipped. A non-finite gradient anywhere
  /// rejects the whole step (nothing is modified) with a NumericError.
  void step();

  void zero_grad();

  const AdamState<T>& state() const { return state_; }
  AdamState<T>& state() { return state_; }
  double last_learning_rate() const { return last_lr_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<double> lr_scale_;
  AdamState<T> state_;
  double last_lr_ = 0.0;
};

}  // namespace layalign
