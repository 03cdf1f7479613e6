#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "tinymoe/nn.hpp"

namespace tinymoe {

// Routing probabilities r = softmax(x . W_r) with W_r stored [d_model x N].
template <class T>
RowVec<T> route(const Mat<T>& router_w, const RowVec<T>& x) {
  check(x.cols() == router_w.rows(), ErrorCode::ShapeError, "route: token width does not match router");
  check(x.allFinite(), ErrorCode::NumericError, "route: non-finite token vector");
  RowVec<T> logits = x * router_w;
  check(logits.allFinite(), ErrorCode::NumericError, "route: non-finite router logits");
  const T mx = logits.maxCoeff();
  RowVec<T> r = (logits.array() - mx).exp().matrix();
  r /= r.sum();
  return r;
}

// Indices of the k largest entries, ordered by value; ties go to the lower index.
template <class T>
std::vector<int> top_k_indices(std::span<const T> r, int k) {
  const int n = static_cast<int>(r.size());
  check(k >= 1 && k <= n, ErrorCode::InvalidK, "top-k: k=" + std::to_string(k) + " with N=" + std::to_string(n));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    const auto ra = r[static_cast<std::size_t>(a)];
    const auto rb = r[static_cast<std::size_t>(b)];
    return ra > rb || (ra == rb && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// Keeps the k largest routing values in place and zeros the rest. No
// renormalization: the surviving weights keep their softmax values.
template <class T>
RowVec<T> top_k_select(const RowVec<T>& r, int k) {
  const auto sel = top_k_indices<T>(std::span<const T>(r.data(), static_cast<std::size_t>(r.size())), k);
  RowVec<T> masked = RowVec<T>::Zero(r.size());
  for (int i : sel) {
    masked(i) = r(i);
  }
  return masked;
}

struct MoeParams {
  std::vector<nn::FfnParams> experts;
  ParamId router = nn::kNoParam;
  int top_k = 1;

  int n_experts() const { return static_cast<int>(experts.size()); }
};

template <class T>
struct MoeCache {
  Mat<T> probs;                            // dense routing r, [L x N]
  std::vector<std::vector<int>> selected;  // per token
  std::vector<std::vector<Eigen::Index>> rows;  // per expert: tokens routed to it
  std::vector<Mat<T>> inputs;              // per expert: gathered token vectors
  std::vector<nn::FfnCache<T>> ffn;
  std::vector<Mat<T>> outputs;             // per expert: E_i(x), unweighted
};

// y_t = sum_{i in top-k(t)} r_i(t) E_i(x_t). Only selected experts run.
template <class T>
Mat<T> moe_forward(const ParamStore<T>& ps, const MoeParams& m, const Mat<T>& x, MoeCache<T>* cache) {
  const auto len = x.rows();
  const int n = m.n_experts();
  const Mat<T>& w_r = ps[m.router].value;
  Mat<T> probs(len, n);
  std::vector<std::vector<int>> selected(static_cast<std::size_t>(len));
  std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n));
  for (Eigen::Index t = 0; t < len; ++t) {
    const RowVec<T> r = route<T>(w_r, x.row(t));
    probs.row(t) = r;
    auto sel = top_k_indices<T>(std::span<const T>(r.data(), static_cast<std::size_t>(n)), m.top_k);
    for (int e : sel) {
      rows[static_cast<std::size_t>(e)].push_back(t);
    }
    selected[static_cast<std::size_t>(t)] = std::move(sel);
  }
  Mat<T> y = Mat<T>::Zero(len, x.cols());
  std::vector<Mat<T>> inputs(static_cast<std::size_t>(n));
  std::vector<nn::FfnCache<T>> caches(static_cast<std::size_t>(n));
  std::vector<Mat<T>> outputs(static_cast<std::size_t>(n));
  for (int e = 0; e < n; ++e) {
    const auto& rr = rows[static_cast<std::size_t>(e)];
    if (rr.empty()) {
      continue;
    }
    Mat<T> in(static_cast<Eigen::Index>(rr.size()), x.cols());
    for (std::size_t j = 0; j < rr.size(); ++j) {
      in.row(static_cast<Eigen::Index>(j)) = x.row(rr[j]);
    }
    Mat<T> out = nn::ffn_forward(ps, m.experts[static_cast<std::size_t>(e)], in, &caches[static_cast<std::size_t>(e)]);
    for (std::size_t j = 0; j < rr.size(); ++j) {
      y.row(rr[j]) += probs(rr[j], e) * out.row(static_cast<Eigen::Index>(j));
    }
    inputs[static_cast<std::size_t>(e)] = std::move(in);
    outputs[static_cast<std::size_t>(e)] = std::move(out);
  }
  if (cache != nullptr) {
    cache->probs = std::move(probs);
    cache->selected = std::move(selected);
    cache->rows = std::move(rows);
    cache->inputs = std::move(inputs);
    cache->ffn = std::move(caches);
    cache->outputs = std::move(outputs);
  }
  return y;
}

template <class T>
Mat<T> moe_backward(ParamStore<T>& ps, const MoeParams& m, const Mat<T>& x, const MoeCache<T>& c,
                    const Mat<T>& dy) {
  const auto len = x.rows();
  const int n = m.n_experts();
  Mat<T> dx = Mat<T>::Zero(len, x.cols());
  Mat<T> dr = Mat<T>::Zero(len, n);
  for (int e = 0; e < n; ++e) {
    const auto& rr = c.rows[static_cast<std::size_t>(e)];
    if (rr.empty()) {
      continue;
    }
    const auto& out = c.outputs[static_cast<std::size_t>(e)];
    Mat<T> dout(static_cast<Eigen::Index>(rr.size()), x.cols());
    for (std::size_t j = 0; j < rr.size(); ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      dout.row(jj) = c.probs(rr[j], e) * dy.row(rr[j]);
      dr(rr[j], e) = out.row(jj).dot(dy.row(rr[j]));
    }
    const Mat<T> din = nn::ffn_backward(ps, m.experts[static_cast<std::size_t>(e)],
                                        c.inputs[static_cast<std::size_t>(e)],
                                        c.ffn[static_cast<std::size_t>(e)], dout);
    for (std::size_t j = 0; j < rr.size(); ++j) {
      dx.row(rr[j]) += din.row(static_cast<Eigen::Index>(j));
    }
  }
  // softmax backward; unselected entries carry dr = 0
  Mat<T> dlogits(len, n);
  for (Eigen::Index t = 0; t < len; ++t) {
    const T dot = c.probs.row(t).dot(dr.row(t));
    dlogits.row(t) = c.probs.row(t).array() * (dr.row(t).array() - dot);
  }
  auto& router = ps[m.router];
  if (router.trainable) {
    router.grad.noalias() += x.transpose() * dlogits;
  }
  dx.noalias() += dlogits * router.value.transpose();
  return dx;
}

// --- utilization ----------------------------------------------------------

struct RoutingRecord {
  std::vector<double> dense;   // r
  std::vector<double> masked;  // r~
  std::vector<int> selected;
};

template <class T>
std::vector<RoutingRecord> routing_records(const MoeCache<T>& c) {
  std::vector<RoutingRecord> out;
  out.reserve(c.selected.size());
  for (std::size_t t = 0; t < c.selected.size(); ++t) {
    RoutingRecord rec;
    const auto row = c.probs.row(static_cast<Eigen::Index>(t));
    rec.dense.assign(row.data(), row.data() + row.size());
    rec.masked.assign(rec.dense.size(), 0.0);
    for (int e : c.selected[t]) {
      rec.masked[static_cast<std::size_t>(e)] = rec.dense[static_cast<std::size_t>(e)];
    }
    rec.selected = c.selected[t];
    out.push_back(std::move(rec));
  }
  return out;
}

struct UtilizationStats {
  std::vector<double> frequency;  // selections per routed token, sums to k
  double entropy = 0.0;           // of frequency / k, in [0, log N]
};

// Integer selection counts; merging is associative and order-insensitive.
class UtilizationAccumulator {
 public:
  explicit UtilizationAccumulator(int n_experts) : counts_(static_cast<std::size_t>(n_experts), 0) {}

  void add(const RoutingRecord& rec) {
    for (int e : rec.selected) {
      ++counts_.at(static_cast<std::size_t>(e));
    }
    selections_ += rec.selected.size();
    ++tokens_;
  }

  void merge(const UtilizationAccumulator& other) {
    check(other.counts_.size() == counts_.size(), ErrorCode::ShapeError, "utilization: expert count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      counts_[i] += other.counts_[i];
    }
    selections_ += other.selections_;
    tokens_ += other.tokens_;
  }

  std::uint64_t tokens() const { return tokens_; }

  UtilizationStats stats() const {
    check(tokens_ > 0, ErrorCode::EmptyBatch, "utilization: no routed tokens");
    UtilizationStats s;
    s.frequency.resize(counts_.size());
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      s.frequency[i] = static_cast<double>(counts_[i]) / static_cast<double>(tokens_);
      const double p = static_cast<double>(counts_[i]) / static_cast<double>(selections_);
      if (p > 0.0) {
        s.entropy -= p * std::log(p);
      }
    }
    return s;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t selections_ = 0;
  std::uint64_t tokens_ = 0;
};

inline UtilizationStats utilization_stats(std::span<const RoutingRecord> records, int n_experts) {
  check(!records.empty(), ErrorCode::EmptyBatch, "utilization: empty batch");
  UtilizationAccumulator acc(n_experts);
  for (const auto& r : records) {
    acc.add(r);
  }
  return acc.stats();
}

}  // namespace tinymoe
