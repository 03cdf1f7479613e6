#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>

#include "tinymoe/params.hpp"

namespace tinymoe {

// Linear warm-up over ceil(warmup_ratio * total) steps, then cosine decay to
// zero at total_steps.
inline double lr_at(std::int64_t step, std::int64_t total_steps, double base_lr, double warmup_ratio) {
  check(total_steps > 0, ErrorCode::InvalidSchedule, "total_steps must be positive");
  check(step >= 0 && step <= total_steps, ErrorCode::InvalidSchedule, "step outside [0, total_steps]");
  check(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, ErrorCode::InvalidSchedule, "warmup_ratio outside [0, 1]");
  // the epsilon keeps e.g. 0.03 * 100 from rounding up to 4
  const auto warm = static_cast<std::int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-9));
  if (warm > 0 && step <= warm) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

template <class T>
struct AdamMoments {
  Mat<T> m;
  Mat<T> v;
};

// Adam(W) with bias correction. Moments are allocated only for parameters
// that are trainable when the optimizer is created.
template <class T>
class Adam {
 public:
  Adam(const ParamStore<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (ParamId i = 0; i < params.size(); ++i) {
      if (params[i].trainable) {
        moments_[i] = AdamMoments<T>{Mat<T>::Zero(params[i].value.rows(), params[i].value.cols()),
                                     Mat<T>::Zero(params[i].value.rows(), params[i].value.cols())};
      }
    }
  }

  const std::map<ParamId, AdamMoments<T>>& moments() const { return moments_; }
  std::int64_t steps() const { return step_; }

  double grad_norm(const ParamStore<T>& params) const {
    double sq = 0.0;
    for (const auto& [id, mom] : moments_) {
      sq += params[id].grad.template cast<double>().squaredNorm();
    }
    return std::sqrt(sq);
  }

  void step(ParamStore<T>& params, double lr) {
    ++step_;
    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      const double norm = grad_norm(params);
      if (norm > cfg_.grad_clip) {
        clip_scale = cfg_.grad_clip / norm;
      }
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [id, mom] : moments_) {
      auto& p = params[id];
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad.data()[i]) * clip_scale;
        const double m = cfg_.beta1 * static_cast<double>(mom.m.data()[i]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(mom.v.data()[i]) + (1.0 - cfg_.beta2) * g * g;
        mom.m.data()[i] = static_cast<T>(m);
        mom.v.data()[i] = static_cast<T>(v);
        const double theta = static_cast<double>(p.value.data()[i]);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) + cfg_.weight_decay * theta;
        p.value.data()[i] = static_cast<T>(theta - lr * update);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::map<ParamId, AdamMoments<T>> moments_;
  std::int64_t step_ = 0;
};

}  // namespace tinymoe
