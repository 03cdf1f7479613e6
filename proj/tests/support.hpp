#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tinymoe/tinymoe.hpp"

namespace support {

using namespace tinymoe;

// ~250 parameters dense, well under 2k after a 4-expert upcycle.
inline ModelConfig tiny_config(std::uint64_t seed = 3) {
  return ModelConfig{.vocab_size = 6, .d_model = 4, .n_layers = 1, .n_heads = 2, .d_ff = 6, .max_seq = 10,
                     .n_image_tokens = 2, .d_vision = 3, .patch_dim = 3, .d_adaptor = 4, .seed = seed};
}

// Random text of `text_len` tokens whose last `n_resp` tokens are the response.
template <class T>
Example<T> random_example(const ModelConfig& cfg, Rng& rng, int text_len, int n_resp) {
  Example<T> ex;
  ex.pixels = Mat<T>(cfg.n_image_tokens, cfg.patch_dim);
  for (Eigen::Index i = 0; i < ex.pixels.size(); ++i) ex.pixels.data()[i] = static_cast<T>(rng.normal());
  for (int i = 0; i < text_len; ++i) ex.tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  const auto n_img = static_cast<std::size_t>(cfg.n_image_tokens);
  const auto len = n_img + ex.tokens.size();
  ex.targets.assign(len, -1);
  ex.mask.assign(len, 0);
  for (std::size_t p = 0; p + 1 < len; ++p) {
    if (p + 1 < n_img) continue;
    const auto ti = p + 1 - n_img;
    ex.targets[p] = ex.tokens[ti];
    ex.mask[p] = ti >= static_cast<std::size_t>(text_len - n_resp) ? 1 : 0;
  }
  return ex;
}

inline void randomize(Model<double>& m, Rng& rng, double scale = 0.5) {
  for (auto& p : m.params()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = scale * rng.normal();
  }
}

struct GradCheck {
  double worst_rel = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

// Compares accumulated gradients against Richardson-extrapolated central
// differences with base step 1e-3. Entries where both sides are below
// `floor` in magnitude are treated as zero.
inline GradCheck check_gradients(Model<double>& m, const std::function<double(const Model<double>&)>& loss,
                                 const std::function<void(Model<double>&)>& backward, double tol = 1e-4,
                                 double floor = 1e-9, double h = 1e-3) {
  auto& ps = m.params();
  ps.set_all_trainable(true);
  ps.zero_grad();
  backward(m);
  GradCheck out;
  for (auto& p : ps) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      const auto diff = [&](double step) {
        p.value.data()[i] = orig + step;
        const double up = loss(m);
        p.value.data()[i] = orig - step;
        const double down = loss(m);
        p.value.data()[i] = orig;
        return (up - down) / (2.0 * step);
      };
      const double numeric = (4.0 * diff(h / 2.0) - diff(h)) / 3.0;
      const double analytic = p.grad.data()[i];
      ++out.checked;
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      if (scale < floor) continue;
      const double rel = std::abs(numeric - analytic) / scale;
      if (rel > out.worst_rel) {
        out.worst_rel = rel;
        out.worst_param = p.name;
      }
      if (rel > tol) ++out.failures;
    }
  }
  return out;
}

}  // namespace support
