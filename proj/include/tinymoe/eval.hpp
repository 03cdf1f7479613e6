#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <istream>
#include <optional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tinymoe/data.hpp"
#include "tinymoe/losses.hpp"
#include "tinymoe/model.hpp"

namespace tinymoe {

// --- metrics report -----------------------------------------------------------

struct MetricRow {
  std::int64_t step = 0;
  std::string metric;
  double value = 0.0;
};

// Flat (step, metric, value) series; rendered as CSV with header
// `step,metric,value` and as a JSON summary of each metric's last value.
class MetricsReport {
 public:
  void add(std::int64_t step, std::string metric, double value) {
    check(std::isfinite(value), ErrorCode::NumericError, "non-finite metric " + metric);
    if (metric.ends_with("kl_to_teacher")) {
      check(value >= -1e-12, ErrorCode::NumericError, "negative KL");
    }
    if (metric.ends_with("accuracy") || metric.ends_with("resp_rate") || metric.ends_with("ment_rate")) {
      check(value >= 0.0 && value <= 1.0, ErrorCode::NumericError, metric + " outside [0, 1]");
    }
    rows_.push_back({step, std::move(metric), value});
  }

  void append(const MetricsReport& other, const std::string& prefix = {}) {
    for (const auto& r : other.rows_) rows_.push_back({r.step, prefix + r.metric, r.value});
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

  std::vector<MetricRow> series(const std::string& metric) const {
    std::vector<MetricRow> out;
    for (const auto& r : rows_) {
      if (r.metric == metric) out.push_back(r);
    }
    return out;
  }

  std::optional<double> last(const std::string& metric) const {
    for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
      if (it->metric == metric) return it->value;
    }
    return std::nullopt;
  }
  std::optional<double> first(const std::string& metric) const {
    for (const auto& r : rows_) {
      if (r.metric == metric) return r.value;
    }
    return std::nullopt;
  }

  std::string to_csv() const {
    std::string out = "step,metric,value\n";
    char buf[64];
    for (const auto& r : rows_) {
      std::snprintf(buf, sizeof buf, "%.10g", r.value);
      out += std::to_string(r.step) + "," + r.metric + "," + buf + "\n";
    }
    return out;
  }

  static MetricsReport from_csv(std::istream& in) {
    MetricsReport r;
    std::string line;
    check(static_cast<bool>(std::getline(in, line)) && line == "step,metric,value", ErrorCode::InvalidConfig,
          "metrics CSV must start with step,metric,value");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto a = line.find(',');
      const auto b = line.rfind(',');
      check(a != std::string::npos && b > a, ErrorCode::InvalidConfig, "malformed metrics row '" + line + "'");
      try {
        r.rows_.push_back({std::stoll(line.substr(0, a)), line.substr(a + 1, b - a - 1), std::stod(line.substr(b + 1))});
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::InvalidConfig, "malformed metrics row '" + line + "'");
      }
    }
    return r;
  }

  nlohmann::json summary() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& r : rows_) j[r.metric] = r.value;
    return j;
  }

 private:
  std::vector<MetricRow> rows_;
};

// --- decoding -----------------------------------------------------------------

// Greedy decoding: argmax per step, ties to the lowest token id, stops at <eos>.
template <class T>
std::vector<int> greedy_decode(const Model<T>& model, const Mat<T>& pixels, std::vector<int> prompt,
                               int max_new_tokens = -1) {
  const int room = model.config().max_seq - model.config().n_image_tokens - static_cast<int>(prompt.size());
  const int budget = max_new_tokens < 0 ? room : std::min(room, max_new_tokens);
  std::vector<int> out;
  for (int i = 0; i < budget; ++i) {
    const Mat<T> logits = model.logits(pixels, prompt);
    const auto last = logits.rows() - 1;
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
      if (logits(last, j) > logits(last, best)) best = j;
    }
    if (best == data::kEos) break;
    out.push_back(static_cast<int>(best));
    prompt.push_back(static_cast<int>(best));
  }
  return out;
}

// A policy maps (image, instruction) to a response string.
template <class T>
struct GreedyPolicy {
  const Model<T>* model;

  std::string operator()(const data::GridImage& img, const std::string& instruction) const {
    return data::detokenize(greedy_decode(*model, data::render<T>(img), data::prompt_tokens(instruction)));
  }
};

template <class T>
GreedyPolicy<T> greedy_policy(const Model<T>& m) {
  return GreedyPolicy<T>{&m};
}

template <class Policy>
std::vector<std::string> decode_all(const Policy& policy, std::span<const data::Sample> prompts) {
  std::vector<std::string> out;
  out.reserve(prompts.size());
  for (const auto& s : prompts) out.push_back(policy(s.image, s.instruction));
  return out;
}

// --- task metrics ---------------------------------------------------------------

inline double accuracy_of(std::span<const data::Sample> heldout, std::span<const std::string> responses) {
  check(!heldout.empty(), ErrorCode::EmptyEval, "empty evaluation set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) hits += responses[i] == heldout[i].response ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(heldout.size());
}

template <class Policy>
double eval_accuracy(const Policy& policy, std::span<const data::Sample> heldout) {
  const auto responses = decode_all(policy, heldout);
  return accuracy_of(heldout, responses);
}

struct HallucinationRates {
  double resp_rate = 0.0;  // responses with at least one false claim
  double ment_rate = 0.0;  // false color/shape/number mentions over all mentions
};

inline HallucinationRates hallucination_of(std::span<const data::Sample> prompts,
                                           std::span<const std::string> responses) {
  check(!prompts.empty(), ErrorCode::EmptyEval, "empty evaluation set");
  std::size_t bad_responses = 0, mentions = 0, false_mentions = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto v = data::verify(prompts[i].image, prompts[i].instruction, responses[i]);
    bad_responses += v.hallucinated() ? 1 : 0;
    mentions += static_cast<std::size_t>(v.mentions);
    false_mentions += static_cast<std::size_t>(v.false_mentions);
  }
  HallucinationRates r;
  r.resp_rate = static_cast<double>(bad_responses) / static_cast<double>(prompts.size());
  r.ment_rate = mentions == 0 ? 0.0 : static_cast<double>(false_mentions) / static_cast<double>(mentions);
  return r;
}

template <class Policy>
HallucinationRates eval_hallucination(const Policy& policy, std::span<const data::Sample> prompts) {
  const auto responses = decode_all(policy, prompts);
  return hallucination_of(prompts, responses);
}

// Mean over examples of the per-example response-position KL(pi_T || pi_S).
template <class T>
double eval_kl_to_teacher(const Model<T>& student, const Model<T>& teacher, std::span<const Example<T>> heldout) {
  check(!heldout.empty(), ErrorCode::EmptyEval, "empty evaluation set");
  check(student.config().vocab_size == teacher.config().vocab_size, ErrorCode::ShapeError,
        "student and teacher vocabularies differ");
  double sum = 0.0;
  for (const auto& ex : heldout) {
    sum += kd_kl_loss(student.logits(ex.pixels, ex.tokens), teacher.logits(ex.pixels, ex.tokens), ex.mask).value;
  }
  return sum / static_cast<double>(heldout.size());
}

// Per MoE layer utilization over every position of every example.
template <class T>
std::vector<UtilizationStats> eval_utilization(const Model<T>& model, std::span<const Example<T>> examples) {
  std::vector<UtilizationAccumulator> acc;
  for (const auto& b : model.blocks()) {
    if (const auto* m = std::get_if<MoeParams>(&b.ffn)) acc.emplace_back(m->n_experts());
  }
  for (const auto& ex : examples) {
    const auto tr = model.forward(ex.pixels, ex.tokens);
    std::size_t li = 0;
    for (std::size_t bi = 0; bi < model.blocks().size(); ++bi) {
      if (!std::holds_alternative<MoeParams>(model.blocks()[bi].ffn)) continue;
      for (const auto& rec : routing_records(tr.blocks[bi].moe)) acc[li].add(rec);
      ++li;
    }
  }
  std::vector<UtilizationStats> out;
  for (const auto& a : acc) out.push_back(a.stats());
  return out;
}

// CSV rows (layer, expert, frequency) followed by a (layer, entropy) row per layer.
inline std::string utilization_csv(std::span<const UtilizationStats> layers) {
  std::string out = "layer,expert,frequency\n";
  char buf[64];
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t e = 0; e < layers[l].frequency.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%.10g", layers[l].frequency[e]);
      out += std::to_string(l) + "," + std::to_string(e) + "," + buf + "\n";
    }
    std::snprintf(buf, sizeof buf, "%.10g", layers[l].entropy);
    out += std::to_string(l) + ",entropy," + buf + "\n";
  }
  return out;
}

// Held-out material for in-training evaluation.
struct EvalSets {
  std::vector<data::Sample> heldout;          // accuracy
  std::vector<Example<float>> heldout_examples;  // KL and utilization
  std::vector<data::Sample> probes;           // hallucination
  std::vector<PreferenceExample<float>> pairs;   // implicit reward margin
  double beta = 0.1;

  static EvalSets build(std::span<const data::Sample> heldout, std::span<const data::PreferencePair> probe_pairs,
                        double beta = 0.1) {
    EvalSets e;
    e.heldout.assign(heldout.begin(), heldout.end());
    for (const auto& s : heldout) e.heldout_examples.push_back(data::make_example<float>(s));
    for (const auto& p : probe_pairs) {
      e.probes.push_back(data::Sample{p.image, p.instruction, p.chosen, data::corruption_task(p.corruption)});
      e.pairs.push_back(data::make_preference_example<float>(p));
    }
    e.beta = beta;
    return e;
  }
};

enum class Metric { Kl, Acc, Hall, Util, Margin };

// Evaluates the requested metrics; KL and margin need a teacher.
inline void evaluate_into(MetricsReport& report, std::int64_t step, const Model<float>& model,
                          const Model<float>* teacher, const EvalSets& sets, std::span<const Metric> metrics) {
  for (auto m : metrics) {
    switch (m) {
      case Metric::Kl:
        if (teacher != nullptr && !sets.heldout_examples.empty()) {
          report.add(step, "kl_to_teacher", eval_kl_to_teacher(model, *teacher, std::span(sets.heldout_examples)));
        }
        break;
      case Metric::Acc:
        if (!sets.heldout.empty()) report.add(step, "accuracy", eval_accuracy(greedy_policy(model), std::span(sets.heldout)));
        break;
      case Metric::Hall:
        if (!sets.probes.empty()) {
          const auto h = eval_hallucination(greedy_policy(model), std::span(sets.probes));
          report.add(step, "resp_rate", h.resp_rate);
          report.add(step, "ment_rate", h.ment_rate);
        }
        break;
      case Metric::Util:
        if (model.is_sparse() && !sets.heldout_examples.empty()) {
          const auto u = eval_utilization(model, std::span(sets.heldout_examples));
          for (std::size_t l = 0; l < u.size(); ++l) {
            report.add(step, "utilization_entropy_layer" + std::to_string(l), u[l].entropy);
          }
        }
        break;
      case Metric::Margin:
        if (teacher != nullptr && !sets.pairs.empty()) {
          report.add(step, "mean_margin", implicit_reward_margin(model, *teacher, std::span(sets.pairs), sets.beta));
        }
        break;
    }
  }
}

inline constexpr std::array<Metric, 5> kAllMetrics = {Metric::Kl, Metric::Acc, Metric::Hall, Metric::Util,
                                                      Metric::Margin};

}  // namespace tinymoe
