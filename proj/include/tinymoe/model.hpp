#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tinymoe/moe.hpp"
#include "tinymoe/nn.hpp"
#include "tinymoe/params.hpp"
#include "tinymoe/rng.hpp"

namespace tinymoe {

struct ModelConfig {
  int vocab_size = 33;
  int d_model = 32;
  int n_layers = 1;
  int n_heads = 2;
  int d_ff = 64;
  int max_seq = 32;
  int n_image_tokens = 16;
  int d_vision = 24;
  int patch_dim = 17;
  int d_adaptor = 32;  // adaptor hidden width
  std::uint64_t seed = 0;

  void validate() const {
    check(vocab_size > 0 && d_model > 0 && n_heads > 0 && d_ff > 0 && max_seq > 0 && d_vision > 0 &&
              patch_dim > 0 && d_adaptor > 0 && n_layers >= 0 && n_image_tokens >= 0,
          ErrorCode::InvalidConfig, "model dimensions must be positive");
    check(d_model % n_heads == 0, ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
    check(n_image_tokens < max_seq, ErrorCode::InvalidConfig, "image tokens leave no room for text");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq", c.max_seq},
                     {"n_image_tokens", c.n_image_tokens}, {"d_vision", c.d_vision},
                     {"patch_dim", c.patch_dim},   {"d_adaptor", c.d_adaptor}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.n_image_tokens = j.value("n_image_tokens", d.n_image_tokens);
  c.d_vision = j.value("d_vision", d.d_vision);
  c.patch_dim = j.value("patch_dim", d.patch_dim);
  c.d_adaptor = j.value("d_adaptor", d.d_adaptor);
  c.seed = j.value("seed", d.seed);
}

// Sparse layout of the feed-forward sublayers; n_experts == 0 means dense.
struct MoeShape {
  int n_experts = 0;
  int top_k = 0;

  bool sparse() const { return n_experts > 0; }
  bool operator==(const MoeShape&) const = default;
};

struct BlockLayout {
  ParamId norm1 = nn::kNoParam;
  nn::AttnParams attn;
  ParamId norm2 = nn::kNoParam;
  std::variant<nn::FfnParams, MoeParams> ffn;
};

template <class T>
struct BlockTrace {
  Mat<T> input;
  nn::NormCache<T> norm1;
  Mat<T> normed1;
  nn::AttnCache<T> attn;
  Mat<T> mid;  // residual stream after attention
  nn::NormCache<T> norm2;
  Mat<T> normed2;
  nn::FfnCache<T> ffn;
  MoeCache<T> moe;
};

template <class T>
struct ForwardTrace {
  Mat<T> pixels;
  Mat<T> features;
  Mat<T> adaptor_pre;
  Mat<T> adaptor_act;
  std::vector<int> text;
  std::vector<BlockTrace<T>> blocks;
  Mat<T> final_hidden;
  Mat<T> logits;
};

// ViT stub -> two-layer adaptor -> decoder-only LM. Image tokens precede text
// tokens in a single causal sequence.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, MoeShape moe = {}, bool initialize = true) : cfg_(cfg), moe_(moe) {
    cfg_.validate();
    if (moe_.sparse()) {
      check(moe_.top_k >= 1 && moe_.top_k <= moe_.n_experts, ErrorCode::InvalidK, "top_k outside [1, N]");
    }
    build_layout();
    if (initialize) {
      init_params();
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const MoeShape& moe_shape() const { return moe_; }
  bool is_sparse() const { return moe_.sparse(); }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const std::vector<BlockLayout>& blocks() const { return blocks_; }

  // --- vision stub: linear patch projection without bias --------------------
  Mat<T> encode_image(const Mat<T>& pixels) const {
    check(pixels.rows() == cfg_.n_image_tokens && pixels.cols() == cfg_.patch_dim, ErrorCode::InvalidImage,
          "expected " + std::to_string(cfg_.n_image_tokens) + "x" + std::to_string(cfg_.patch_dim) + " patches, got " +
              std::to_string(pixels.rows()) + "x" + std::to_string(pixels.cols()));
    return nn::linear(params_, pixels, patch_proj_, nn::kNoParam);
  }

  Mat<T> adapt(const Mat<T>& features) const {
    check(features.cols() == cfg_.d_vision, ErrorCode::InvalidFeatures,
          "feature width " + std::to_string(features.cols()) + " != d_vision " + std::to_string(cfg_.d_vision));
    return nn::linear(params_, nn::silu(nn::linear(params_, features, fc1_w_, fc1_b_)), fc2_w_, fc2_b_);
  }

  Mat<T> forward_logits(const Mat<T>& image_tokens, std::span<const int> text) const {
    return run_lm(image_tokens, text, nullptr);
  }

  Mat<T> logits(const Mat<T>& pixels, std::span<const int> text) const {
    return forward_logits(adapt(encode_image(pixels)), text);
  }

  ForwardTrace<T> forward(const Mat<T>& pixels, std::span<const int> text) const {
    ForwardTrace<T> tr;
    tr.pixels = pixels;
    tr.features = encode_image(pixels);
    check(tr.features.cols() == cfg_.d_vision, ErrorCode::InvalidFeatures, "bad feature width");
    tr.adaptor_pre = nn::linear(params_, tr.features, fc1_w_, fc1_b_);
    tr.adaptor_act = nn::silu(tr.adaptor_pre);
    const Mat<T> image_tokens = nn::linear(params_, tr.adaptor_act, fc2_w_, fc2_b_);
    tr.text.assign(text.begin(), text.end());
    tr.logits = run_lm(image_tokens, text, &tr);
    return tr;
  }

  // Accumulates parameter gradients (trainable params only) for dL/dlogits.
  void backward(const ForwardTrace<T>& tr, const Mat<T>& dlogits) {
    check(dlogits.rows() == tr.logits.rows() && dlogits.cols() == tr.logits.cols(), ErrorCode::ShapeError,
          "dlogits shape does not match forward trace");
    Mat<T> dx = nn::linear_backward(params_, tr.final_hidden, dlogits, lm_head_, nn::kNoParam);
    for (std::size_t bi = blocks_.size(); bi-- > 0;) {
      const auto& b = blocks_[bi];
      const auto& bt = tr.blocks[bi];
      Mat<T> dnormed2 = std::visit(
          [&](const auto& f) -> Mat<T> {
            if constexpr (std::is_same_v<std::decay_t<decltype(f)>, nn::FfnParams>) {
              return nn::ffn_backward(params_, f, bt.normed2, bt.ffn, dx);
            } else {
              return moe_backward(params_, f, bt.normed2, bt.moe, dx);
            }
          },
          b.ffn);
      Mat<T> dmid = dx + nn::rms_norm_backward(params_, bt.norm2, dnormed2, b.norm2);
      const Mat<T> dnormed1 = nn::attention_backward(params_, b.attn, cfg_.n_heads, bt.normed1, bt.attn, dmid);
      dx = dmid + nn::rms_norm_backward(params_, bt.norm1, dnormed1, b.norm1);
    }
    const auto n_img = static_cast<Eigen::Index>(cfg_.n_image_tokens);
    auto& pos = params_[pos_emb_];
    if (pos.trainable) {
      pos.grad.topRows(dx.rows()) += dx;
    }
    auto& tok = params_[tok_emb_];
    if (tok.trainable) {
      for (std::size_t i = 0; i < tr.text.size(); ++i) {
        tok.grad.row(tr.text[i]) += dx.row(n_img + static_cast<Eigen::Index>(i));
      }
    }
    if (n_img == 0) {
      return;
    }
    const Mat<T> dimg = dx.topRows(n_img);
    const Mat<T> dact = nn::linear_backward(params_, tr.adaptor_act, dimg, fc2_w_, fc2_b_);
    const Mat<T> dpre = nn::silu_backward(tr.adaptor_pre, dact);
    const bool chi_trainable = params_[patch_proj_].trainable;
    const Mat<T> dfeat = nn::linear_backward(params_, tr.features, dpre, fc1_w_, fc1_b_, chi_trainable);
    if (chi_trainable) {
      nn::linear_backward(params_, tr.pixels, dfeat, patch_proj_, nn::kNoParam, false);
    }
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out(cfg_, moe_, false);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i].value = params_[i].value.template cast<U>();
      out.params()[i].trainable = params_[i].trainable;
    }
    return out;
  }

 private:
  Mat<T> run_lm(const Mat<T>& image_tokens, std::span<const int> text, ForwardTrace<T>* tr) const {
    const auto n_img = static_cast<Eigen::Index>(cfg_.n_image_tokens);
    check(image_tokens.rows() == n_img && image_tokens.cols() == cfg_.d_model, ErrorCode::ShapeError,
          "image tokens must be n_image_tokens x d_model");
    const auto len = n_img + static_cast<Eigen::Index>(text.size());
    check(len <= cfg_.max_seq, ErrorCode::SequenceTooLong,
          "sequence of " + std::to_string(len) + " exceeds max_seq " + std::to_string(cfg_.max_seq));
    Mat<T> x(len, cfg_.d_model);
    if (n_img > 0) {
      x.topRows(n_img) = image_tokens;
    }
    const auto& tok = params_[tok_emb_].value;
    for (std::size_t i = 0; i < text.size(); ++i) {
      check(text[i] >= 0 && text[i] < cfg_.vocab_size, ErrorCode::UnknownSymbol,
            "token id " + std::to_string(text[i]) + " outside vocabulary");
      x.row(n_img + static_cast<Eigen::Index>(i)) = tok.row(text[i]);
    }
    x += params_[pos_emb_].value.topRows(len);
    if (tr != nullptr) {
      tr->blocks.resize(blocks_.size());
    }
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const auto& b = blocks_[bi];
      BlockTrace<T>* bt = tr != nullptr ? &tr->blocks[bi] : nullptr;
      Mat<T> normed1 = nn::rms_norm(params_, x, b.norm1, bt ? &bt->norm1 : nullptr);
      Mat<T> mid = x + nn::attention_forward(params_, b.attn, cfg_.n_heads, normed1, bt ? &bt->attn : nullptr);
      Mat<T> normed2 = nn::rms_norm(params_, mid, b.norm2, bt ? &bt->norm2 : nullptr);
      Mat<T> ffn_out = std::visit(
          [&](const auto& f) -> Mat<T> {
            if constexpr (std::is_same_v<std::decay_t<decltype(f)>, nn::FfnParams>) {
              return nn::ffn_forward(params_, f, normed2, bt ? &bt->ffn : nullptr);
            } else {
              return moe_forward(params_, f, normed2, bt ? &bt->moe : nullptr);
            }
          },
          b.ffn);
      Mat<T> out = mid + ffn_out;
      if (bt != nullptr) {
        bt->input = std::move(x);
        bt->normed1 = std::move(normed1);
        bt->mid = std::move(mid);
        bt->normed2 = std::move(normed2);
      }
      x = std::move(out);
    }
    Mat<T> logits = nn::linear(params_, x, lm_head_, nn::kNoParam);
    if (tr != nullptr) {
      tr->final_hidden = std::move(x);
    }
    return logits;
  }

  static std::size_t sz(int v) { return static_cast<std::size_t>(v); }

  nn::FfnParams add_ffn(const std::string& prefix, ParamGroup g) {
    nn::FfnParams f;
    f.up_w = params_.add(prefix + ".up.weight", {sz(cfg_.d_ff), sz(cfg_.d_model)}, g);
    f.up_b = params_.add(prefix + ".up.bias", {sz(cfg_.d_ff)}, g);
    f.down_w = params_.add(prefix + ".down.weight", {sz(cfg_.d_model), sz(cfg_.d_ff)}, g);
    f.down_b = params_.add(prefix + ".down.bias", {sz(cfg_.d_model)}, g);
    return f;
  }

  void build_layout() {
    const auto d = sz(cfg_.d_model);
    patch_proj_ = params_.add("vision.patch_proj.weight", {sz(cfg_.d_vision), sz(cfg_.patch_dim)}, ParamGroup::Chi);
    fc1_w_ = params_.add("adaptor.fc1.weight", {sz(cfg_.d_adaptor), sz(cfg_.d_vision)}, ParamGroup::Omega);
    fc1_b_ = params_.add("adaptor.fc1.bias", {sz(cfg_.d_adaptor)}, ParamGroup::Omega);
    fc2_w_ = params_.add("adaptor.fc2.weight", {d, sz(cfg_.d_adaptor)}, ParamGroup::Omega);
    fc2_b_ = params_.add("adaptor.fc2.bias", {d}, ParamGroup::Omega);
    tok_emb_ = params_.add("embed.tokens", {sz(cfg_.vocab_size), d}, ParamGroup::Phi);
    pos_emb_ = params_.add("embed.positions", {sz(cfg_.max_seq), d}, ParamGroup::Phi);
    for (int i = 0; i < cfg_.n_layers; ++i) {
      const std::string p = "blocks." + std::to_string(i);
      BlockLayout b;
      b.norm1 = params_.add(p + ".norm1.gain", {d}, ParamGroup::Phi);
      b.attn.wq = params_.add(p + ".attn.q.weight", {d, d}, ParamGroup::Phi);
      b.attn.wk = params_.add(p + ".attn.k.weight", {d, d}, ParamGroup::Phi);
      b.attn.wv = params_.add(p + ".attn.v.weight", {d, d}, ParamGroup::Phi);
      b.attn.wo = params_.add(p + ".attn.o.weight", {d, d}, ParamGroup::Phi);
      b.norm2 = params_.add(p + ".norm2.gain", {d}, ParamGroup::Phi);
      if (moe_.sparse()) {
        MoeParams m;
        m.top_k = moe_.top_k;
        m.router = params_.add(p + ".moe.router.weight", {d, sz(moe_.n_experts)}, ParamGroup::PhiE);
        for (int e = 0; e < moe_.n_experts; ++e) {
          m.experts.push_back(add_ffn(p + ".moe.experts." + std::to_string(e), ParamGroup::PhiE));
        }
        b.ffn = std::move(m);
      } else {
        b.ffn = add_ffn(p + ".ffn", ParamGroup::Phi);
      }
      blocks_.push_back(std::move(b));
    }
    lm_head_ = params_.add("lm_head.weight", {sz(cfg_.vocab_size), d}, ParamGroup::Phi);
  }

  void init_params() {
    Rng rng(cfg_.seed);
    const double residual = 1.0 / std::sqrt(2.0 * std::max(1, cfg_.n_layers));
    for (auto& p : params_) {
      const std::string& n = p.name;
      double stddev = 0.0;
      double constant = 0.0;
      const auto ends_with = [&](std::string_view s) { return n.size() >= s.size() && n.ends_with(s); };
      if (ends_with(".bias") || ends_with("router.weight")) {
        stddev = 0.0;
      } else if (ends_with(".gain")) {
        constant = 1.0;
      } else if (n == "embed.tokens") {
        stddev = 1.0;
      } else if (n == "embed.positions") {
        stddev = 0.5;
      } else {
        // weights stored [out x in]
        stddev = 1.0 / std::sqrt(static_cast<double>(p.value.cols()));
        if (ends_with("attn.o.weight") || ends_with("down.weight")) {
          stddev *= residual;
        }
      }
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = static_cast<T>(stddev > 0.0 ? stddev * rng.normal() : constant);
      }
    }
  }

  ModelConfig cfg_;
  MoeShape moe_;
  ParamStore<T> params_;
  ParamId patch_proj_ = nn::kNoParam;
  ParamId fc1_w_ = nn::kNoParam, fc1_b_ = nn::kNoParam, fc2_w_ = nn::kNoParam, fc2_b_ = nn::kNoParam;
  ParamId tok_emb_ = nn::kNoParam, pos_emb_ = nn::kNoParam, lm_head_ = nn::kNoParam;
  std::vector<BlockLayout> blocks_;
};

template <class T>
ParamGroups param_groups(const Model<T>& m) {
  return param_groups(m.params());
}

// Parameter count of one dense feed-forward block.
inline std::size_t ffn_param_count(const ModelConfig& c) {
  return static_cast<std::size_t>(2 * c.d_model * c.d_ff + c.d_ff + c.d_model);
}

}  // namespace tinymoe
