#pragma once

#include <string>

#include "tinymoe/model.hpp"

namespace tinymoe {

// Sparse upcycling: every dense FFN becomes N identical experts, the router
// starts at zero, and every other parameter is copied bit-for-bit.
template <class T>
Model<T> upcycle(const Model<T>& dense, int n_experts, int top_k) {
  check(!dense.is_sparse(), ErrorCode::AlreadySparse, "model already has MoE feed-forward layers");
  check(n_experts >= 1 && top_k >= 1 && top_k <= n_experts, ErrorCode::InvalidK,
        "upcycle needs 1 <= k <= N (N=" + std::to_string(n_experts) + ", k=" + std::to_string(top_k) + ")");
  Model<T> sparse(dense.config(), MoeShape{n_experts, top_k}, false);
  const auto& src = dense.params();
  auto& dst = sparse.params();
  const std::string moe_tag = ".moe.";
  for (auto& p : dst) {
    const auto pos = p.name.find(moe_tag);
    if (pos == std::string::npos) {
      p.value = src[src.id_of(p.name)].value;
      continue;
    }
    const std::string block = p.name.substr(0, pos);
    const std::string rest = p.name.substr(pos + moe_tag.size());
    if (rest == "router.weight") {
      p.value.setZero();
      continue;
    }
    // rest = "experts.<e>.<up|down>.<weight|bias>"
    const auto dot = rest.find('.', std::string("experts.").size());
    p.value = src[src.id_of(block + ".ffn" + rest.substr(dot))].value;
  }
  return sparse;
}

}  // namespace tinymoe
