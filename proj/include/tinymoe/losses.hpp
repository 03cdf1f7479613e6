#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tinymoe/example.hpp"
#include "tinymoe/model.hpp"

namespace tinymoe {

// Loss value (64-bit) plus its gradient with respect to the student logits.
template <class T>
struct LossGrad {
  double value = 0.0;
  Mat<T> dlogits;
};

namespace detail {

// log-softmax of one row, max-subtracted, evaluated in double.
template <class T>
void log_softmax_row(const Mat<T>& logits, Eigen::Index row, std::vector<double>& out) {
  const auto v = logits.cols();
  out.resize(static_cast<std::size_t>(v));
  double mx = static_cast<double>(logits(row, 0));
  for (Eigen::Index j = 1; j < v; ++j) {
    mx = std::max(mx, static_cast<double>(logits(row, j)));
  }
  double sum = 0.0;
  for (Eigen::Index j = 0; j < v; ++j) {
    sum += std::exp(static_cast<double>(logits(row, j)) - mx);
  }
  const double lse = mx + std::log(sum);
  for (Eigen::Index j = 0; j < v; ++j) {
    out[static_cast<std::size_t>(j)] = static_cast<double>(logits(row, j)) - lse;
  }
}

inline std::size_t count_mask(std::span<const std::uint8_t> mask) {
  std::size_t m = 0;
  for (auto b : mask) {
    m += b != 0 ? 1 : 0;
  }
  return m;
}

template <class T>
void check_mask(const Mat<T>& logits, std::span<const std::uint8_t> mask) {
  check(static_cast<Eigen::Index>(mask.size()) == logits.rows(), ErrorCode::ShapeError,
        "mask length does not match logit rows");
  check(count_mask(mask) > 0, ErrorCode::EmptyResponse, "mask selects no response positions");
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace detail

// Mean over masked positions of -log pi_S(label).
template <class T>
LossGrad<T> init_ce_loss(const Mat<T>& logits, std::span<const int> labels, std::span<const std::uint8_t> mask) {
  detail::check_mask(logits, mask);
  check(labels.size() == mask.size(), ErrorCode::ShapeError, "labels length does not match mask");
  const auto m = static_cast<double>(detail::count_mask(mask));
  LossGrad<T> out;
  out.dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  std::vector<double> lsm;
  for (Eigen::Index p = 0; p < logits.rows(); ++p) {
    if (mask[static_cast<std::size_t>(p)] == 0) {
      continue;
    }
    const int y = labels[static_cast<std::size_t>(p)];
    check(y >= 0 && y < logits.cols(), ErrorCode::InvalidLabel, "label " + std::to_string(y) + " outside vocabulary");
    detail::log_softmax_row(logits, p, lsm);
    out.value -= lsm[static_cast<std::size_t>(y)];
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      out.dlogits(p, j) = static_cast<T>(std::exp(lsm[static_cast<std::size_t>(j)]) / m);
    }
    out.dlogits(p, y) -= static_cast<T>(1.0 / m);
  }
  out.value /= m;
  return out;
}

// Mean over masked positions of KL(pi_T || pi_S) over the full vocabulary.
// d/dz_S = softmax(z_S) - softmax(z_T) per position.
template <class T>
LossGrad<T> kd_kl_loss(const Mat<T>& student, const Mat<T>& teacher, std::span<const std::uint8_t> mask) {
  check(student.rows() == teacher.rows() && student.cols() == teacher.cols(), ErrorCode::ShapeError,
        "student and teacher logits differ in shape");
  detail::check_mask(student, mask);
  const auto m = static_cast<double>(detail::count_mask(mask));
  LossGrad<T> out;
  out.dlogits = Mat<T>::Zero(student.rows(), student.cols());
  std::vector<double> ls, lt;
  for (Eigen::Index p = 0; p < student.rows(); ++p) {
    if (mask[static_cast<std::size_t>(p)] == 0) {
      continue;
    }
    detail::log_softmax_row(student, p, ls);
    detail::log_softmax_row(teacher, p, lt);
    double kl = 0.0;
    for (std::size_t j = 0; j < ls.size(); ++j) {
      const double t = std::exp(lt[j]);
      if (t > 0.0) {
        kl += t * (lt[j] - ls[j]);
      }
      out.dlogits(p, static_cast<Eigen::Index>(j)) = static_cast<T>((std::exp(ls[j]) - t) / m);
    }
    out.value += kl;
  }
  out.value /= m;
  return out;
}

// CE on ground truth plus kl_weight * KL to the teacher, on the same positions.
template <class T>
LossGrad<T> d2s_loss(const Mat<T>& student, const Mat<T>& teacher, std::span<const int> labels,
                     std::span<const std::uint8_t> mask, double kl_weight = 1.0) {
  auto ce = init_ce_loss(student, labels, mask);
  auto kl = kd_kl_loss(student, teacher, mask);
  ce.value += kl_weight * kl.value;
  ce.dlogits += static_cast<T>(kl_weight) * kl.dlogits;
  return ce;
}

// Sum of log pi(target) over masked positions, with its logit gradient.
template <class T>
LossGrad<T> sequence_logprob_from_logits(const Mat<T>& logits, std::span<const int> targets,
                                         std::span<const std::uint8_t> mask) {
  detail::check_mask(logits, mask);
  LossGrad<T> out;
  out.dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  std::vector<double> lsm;
  for (Eigen::Index p = 0; p < logits.rows(); ++p) {
    if (mask[static_cast<std::size_t>(p)] == 0) {
      continue;
    }
    const int y = targets[static_cast<std::size_t>(p)];
    check(y >= 0 && y < logits.cols(), ErrorCode::InvalidLabel, "target outside vocabulary");
    detail::log_softmax_row(logits, p, lsm);
    out.value += lsm[static_cast<std::size_t>(y)];
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      out.dlogits(p, j) = static_cast<T>(-std::exp(lsm[static_cast<std::size_t>(j)]));
    }
    out.dlogits(p, y) += T(1);
  }
  return out;
}

template <class T>
double sequence_logprob(const Model<T>& model, const Example<T>& ex) {
  return sequence_logprob_from_logits(model.logits(ex.pixels, ex.tokens), ex.targets, ex.mask).value;
}

// Forward + backward of scale * log pi(y|x); returns log pi(y|x).
template <class T>
double sequence_logprob_backward(Model<T>& model, const Example<T>& ex, double scale) {
  const auto tr = model.forward(ex.pixels, ex.tokens);
  auto lp = sequence_logprob_from_logits(tr.logits, ex.targets, ex.mask);
  model.backward(tr, lp.dlogits * static_cast<T>(scale));
  return lp.value;
}

struct DpoTerms {
  double loss = 0.0;
  double margin = 0.0;  // beta * (delta_chosen - delta_rejected)
};

// -log sigma(beta * [(s+ - t+) - (s- - t-)]) for one pair of sequence log-probs.
inline DpoTerms dpo_from_logprobs(double student_chosen, double teacher_chosen, double student_rejected,
                                  double teacher_rejected, double beta) {
  check(beta > 0.0 && std::isfinite(beta), ErrorCode::InvalidBeta, "beta must be positive");
  DpoTerms t;
  t.margin = beta * ((student_chosen - teacher_chosen) - (student_rejected - teacher_rejected));
  t.loss = detail::softplus(-t.margin);
  return t;
}

namespace detail {

template <class T>
void check_pair(const PreferenceExample<T>& pair) {
  check(pair.chosen.tokens != pair.rejected.tokens, ErrorCode::ShapeError,
        "preference pair has identical chosen and rejected responses");
}

}  // namespace detail

// Batch-mean DPO loss with the frozen teacher as the reference policy.
template <class T>
DpoTerms dpo_loss(const Model<T>& student, const Model<T>& teacher, std::span<const PreferenceExample<T>> batch,
                  double beta) {
  check(beta > 0.0 && std::isfinite(beta), ErrorCode::InvalidBeta, "beta must be positive");
  check(!batch.empty(), ErrorCode::EmptyBatch, "empty preference batch");
  DpoTerms mean;
  for (const auto& pair : batch) {
    detail::check_pair(pair);
    const auto t = dpo_from_logprobs(sequence_logprob(student, pair.chosen), sequence_logprob(teacher, pair.chosen),
                                     sequence_logprob(student, pair.rejected),
                                     sequence_logprob(teacher, pair.rejected), beta);
    mean.loss += t.loss;
    mean.margin += t.margin;
  }
  mean.loss /= static_cast<double>(batch.size());
  mean.margin /= static_cast<double>(batch.size());
  return mean;
}

template <class T>
double implicit_reward_margin(const Model<T>& student, const Model<T>& teacher,
                              std::span<const PreferenceExample<T>> batch, double beta) {
  return dpo_loss(student, teacher, batch, beta).margin;
}

// Accumulates the gradient of the batch-mean DPO loss into the student.
// Teacher log-probs may be supplied precomputed as (chosen, rejected) pairs.
template <class T>
DpoTerms dpo_loss_backward(Model<T>& student, const Model<T>& teacher, std::span<const PreferenceExample<T>> batch,
                           double beta, std::span<const std::pair<double, double>> teacher_logprobs = {}) {
  check(beta > 0.0 && std::isfinite(beta), ErrorCode::InvalidBeta, "beta must be positive");
  check(!batch.empty(), ErrorCode::EmptyBatch, "empty preference batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  DpoTerms mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    detail::check_pair(pair);
    double t_pos = 0.0, t_neg = 0.0;
    if (teacher_logprobs.empty()) {
      t_pos = sequence_logprob(teacher, pair.chosen);
      t_neg = sequence_logprob(teacher, pair.rejected);
    } else {
      t_pos = teacher_logprobs[i].first;
      t_neg = teacher_logprobs[i].second;
    }
    const auto tr_pos = student.forward(pair.chosen.pixels, pair.chosen.tokens);
    const auto tr_neg = student.forward(pair.rejected.pixels, pair.rejected.tokens);
    auto lp_pos = sequence_logprob_from_logits(tr_pos.logits, pair.chosen.targets, pair.chosen.mask);
    auto lp_neg = sequence_logprob_from_logits(tr_neg.logits, pair.rejected.targets, pair.rejected.mask);
    const auto terms = dpo_from_logprobs(lp_pos.value, t_pos, lp_neg.value, t_neg, beta);
    // dL/dm = -sigma(-m)
    const double dm = -detail::sigmoid(-terms.margin) * inv_b;
    student.backward(tr_pos, lp_pos.dlogits * static_cast<T>(dm * beta));
    student.backward(tr_neg, lp_neg.dlogits * static_cast<T>(-dm * beta));
    mean.loss += terms.loss * inv_b;
    mean.margin += terms.margin * inv_b;
  }
  return mean;
}

}  // namespace tinymoe
