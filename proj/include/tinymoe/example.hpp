#pragma once

#include <cstdint>
#include <vector>

#include "tinymoe/params.hpp"

namespace tinymoe {

// One model input in tensor form. `targets` and `mask` are indexed by logit
// position: position p predicts targets[p], and mask[p] is set only where
// that target is a response token.
template <class T>
struct Example {
  Mat<T> pixels;                // [n_image_tokens x patch_dim]
  std::vector<int> tokens;      // text tokens, image tokens excluded
  std::vector<int> targets;     // -1 where there is no next token
  std::vector<std::uint8_t> mask;
};

template <class T>
struct PreferenceExample {
  Example<T> chosen;
  Example<T> rejected;
};

}  // namespace tinymoe
