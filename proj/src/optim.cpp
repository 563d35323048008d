// SPDX-License-Identifier: Apache-2.0
#include "layalign/optim.hpp"

#include <cmath>
#include <string>

namespace layalign {

std::size_t warmup_steps(const AdamConfig& config) {
  if (config.warmup_ratio <= 0.0 || config.total_steps == 0) return 0;
  return static_cast<std::size_t>(
      std::ceil(config.warmup_ratio * static_cast<double>(config.total_steps)));
}

double scheduled_learning_rate(const AdamConfig& config, std::size_t step) {
  const std::size_t w = warmup_steps(config);
  if (w == 0 || step >= w) return config.learning_rate;
  return config.learning_rate * static_cast<double>(step + 1) / static_cast<double>(w);
}

template <class T>
Adam<T>::Adam(AdamConfig config, std::vector<Tensor<T>> params, std::vector<double> lr_scale)
    : params_(std::move(params)), lr_scale_(std::move(lr_scale)) {
  if (lr_scale_.empty()) lr_scale_.assign(params_.size(), 1.0);
  if (lr_scale_.size() != params_.size()) {
    throw ContractError("lr_scale has " + std::to_string(lr_scale_.size()) + " entries for " +
                        std::to_string(params_.size()) + " parameters");
  }
  state_.config = config;
  for (const auto& p : params_) {
    state_.first_moment.emplace_back(p.numel(), T(0));
    state_.second_moment.emplace_back(p.numel(), T(0));
  }
}

template <class T>
void Adam<T>::step() {
  double sq_norm = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    for (T g : params_[i].grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter #" + std::to_string(i) +
                           " at update " + std::to_string(state_.step) + "; step rejected");
      }
      sq_norm += static_cast<double>(g) * g;
    }
  }
  const AdamConfig& c = state_.config;
  double clip = 1.0;
  if (c.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > c.clip_norm) clip = c.clip_norm / norm;
  }
  const std::size_t t = state_.step + 1;
  const double lr = scheduled_learning_rate(c, state_.step);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    auto data = params_[i].mutable_data();
    auto grad = params_[i].grad();
    auto& m = state_.first_moment[i];
    auto& v = state_.second_moment[i];
    const double lr_i = lr * lr_scale_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * clip;
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr_i * (mj / bc1) / (std::sqrt(vj / bc2) + c.epsilon);
      data[j] = static_cast<T>(static_cast<double>(data[j]) - update);
    }
  }
  last_lr_ = lr;
  state_.step = t;
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace layalign
