#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "tinymoe/checkpoint.hpp"
#include "tinymoe/data.hpp"
#include "tinymoe/eval.hpp"
#include "tinymoe/losses.hpp"
#include "tinymoe/optim.hpp"
#include "tinymoe/upcycle.hpp"

namespace tinymoe {

namespace detail {

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace detail

enum class StageKind { Init, D2D, D2S, PD };
enum class Objective { CE, KL, CEKL, DPO };

constexpr std::string_view stage_name(StageKind k) {
  switch (k) {
    case StageKind::Init: return "init";
    case StageKind::D2D: return "d2d";
    case StageKind::D2S: return "d2s";
    case StageKind::PD: return "pd";
  }
  return "?";
}

inline StageKind parse_stage(std::string_view s) {
  for (auto k : {StageKind::Init, StageKind::D2D, StageKind::D2S, StageKind::PD}) {
    if (stage_name(k) == s) return k;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown stage kind '" + std::string(s) + "'");
}

constexpr std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::CE: return "ce";
    case Objective::KL: return "kl";
    case Objective::CEKL: return "ce_kl";
    case Objective::DPO: return "dpo";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  for (auto o : {Objective::CE, Objective::KL, Objective::CEKL, Objective::DPO}) {
    if (objective_name(o) == s) return o;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown objective '" + std::string(s) + "'");
}

inline std::vector<ParamGroup> stage_groups(StageKind k) {
  switch (k) {
    case StageKind::Init: return {ParamGroup::Omega};
    case StageKind::D2D: return {ParamGroup::Omega, ParamGroup::Phi};
    case StageKind::D2S:
    case StageKind::PD: return {ParamGroup::Omega, ParamGroup::PhiE};
  }
  return {};
}

inline Objective stage_objective(StageKind k) {
  switch (k) {
    case StageKind::Init: return Objective::CE;
    case StageKind::D2D: return Objective::KL;
    case StageKind::D2S: return Objective::CEKL;
    case StageKind::PD: return Objective::DPO;
  }
  return Objective::CE;
}

inline bool stage_is_sparse(StageKind k) { return k == StageKind::D2S || k == StageKind::PD; }

struct StageConfig {
  StageKind kind = StageKind::Init;
  std::vector<ParamGroup> trainable_groups;
  Objective objective = Objective::CE;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  int epochs = 1;
  double warmup_ratio = 0.03;
  std::string dataset_id;
  std::uint64_t seed = 0;
  double kl_weight = 1.0;
  double beta = 0.1;
  double grad_clip = 0.0;
  int eval_every = 0;  // 0: evaluate only at stage start and end

  // Per-kind defaults: learning rates 1e-4 / 2e-5 / 2e-5 / 2e-6, batch 32, one epoch.
  static StageConfig defaults(StageKind kind) {
    StageConfig s;
    s.kind = kind;
    s.trainable_groups = stage_groups(kind);
    s.objective = stage_objective(kind);
    s.dataset_id = std::string(stage_name(kind));
    switch (kind) {
      case StageKind::Init: s.lr = 1e-4; break;
      case StageKind::D2D:
      case StageKind::D2S: s.lr = 2e-5; break;
      case StageKind::PD: s.lr = 2e-6; break;
    }
    return s;
  }

  void validate() const {
    const auto want = stage_groups(kind);
    const std::set<ParamGroup> have(trainable_groups.begin(), trainable_groups.end());
    check(have == std::set<ParamGroup>(want.begin(), want.end()), ErrorCode::InvalidConfig,
          std::string("stage ") + std::string(stage_name(kind)) + " has the wrong trainable groups");
    check(!have.contains(ParamGroup::Chi), ErrorCode::InvalidConfig, "vision parameters are never trainable");
    check(lr > 0.0 && std::isfinite(lr), ErrorCode::InvalidConfig, "lr must be positive");
    check(batch_size >= 1 && epochs >= 1, ErrorCode::InvalidConfig, "batch_size and epochs must be positive");
    check(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, ErrorCode::InvalidConfig, "warmup_ratio outside [0, 1]");
    check((objective == Objective::DPO) == (kind == StageKind::PD), ErrorCode::InvalidConfig,
          "only the preference stage uses the DPO objective");
    if (objective == Objective::DPO) {
      check(beta > 0.0, ErrorCode::InvalidBeta, "beta must be positive");
    }
  }
};

using Dataset = std::variant<std::vector<data::Sample>, std::vector<data::PreferencePair>>;
using DataRegistry = std::map<std::string, Dataset>;

// --- generic trainer ------------------------------------------------------------

struct TrainSpec {
  Objective objective = Objective::CE;
  std::function<bool(const Param<float>&)> trainable;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  int epochs = 1;
  double warmup_ratio = 0.03;
  std::uint64_t seed = 0;
  double kl_weight = 1.0;
  double beta = 0.1;
  AdamConfig adam;
  int eval_every = 0;
};

inline std::function<bool(const Param<float>&)> groups_predicate(std::vector<ParamGroup> groups) {
  return [groups = std::move(groups)](const Param<float>& p) {
    return std::find(groups.begin(), groups.end(), p.group) != groups.end();
  };
}

namespace detail {

inline Mat<float> pad_rows(const Mat<float>& m, Eigen::Index rows) {
  if (m.rows() == rows) return m;
  Mat<float> out = Mat<float>::Zero(rows, m.cols());
  out.topRows(m.rows()) = m;
  return out;
}

}  // namespace detail

// Runs `spec` over `dataset`; only parameters selected by spec.trainable move.
// Steps are numbered step_offset+1 .. step_offset+total in the report.
inline MetricsReport train(Model<float>& student, const Model<float>* teacher, const TrainSpec& spec,
                           const Dataset& dataset, const EvalSets* eval = nullptr, std::int64_t step_offset = 0) {
  const bool needs_teacher = spec.objective != Objective::CE;
  check(!needs_teacher || teacher != nullptr, ErrorCode::TeacherUnavailable, "objective needs a teacher");
  const bool preference = spec.objective == Objective::DPO;
  check(preference == std::holds_alternative<std::vector<data::PreferencePair>>(dataset), ErrorCode::InvalidConfig,
        "dataset type does not match the objective");

  auto& ps = student.params();
  for (auto& p : ps) p.trainable = spec.trainable(p);
  Adam<float> opt(ps, spec.adam);

  std::vector<Example<float>> examples;
  std::vector<PreferenceExample<float>> pairs;
  if (preference) {
    for (const auto& p : std::get<std::vector<data::PreferencePair>>(dataset)) pairs.push_back(data::make_preference_example<float>(p));
  } else {
    for (const auto& s : std::get<std::vector<data::Sample>>(dataset)) examples.push_back(data::make_example<float>(s));
  }
  const std::size_t n = preference ? pairs.size() : examples.size();
  check(n > 0, ErrorCode::EmptyBatch, "empty training set");

  // the teacher is frozen, so its outputs are computed once per example
  std::vector<std::optional<Mat<float>>> teacher_logits(examples.size());
  std::vector<std::optional<std::pair<double, double>>> teacher_lp(pairs.size());

  data::Batcher batcher(n, spec.batch_size, spec.seed);
  const auto total = static_cast<std::int64_t>(batcher.batches_per_epoch()) * spec.epochs;
  MetricsReport report;
  const auto evaluate = [&](std::int64_t step) {
    if (eval != nullptr) evaluate_into(report, step, student, teacher, *eval, kAllMetrics);
  };
  evaluate(step_offset);

  std::int64_t step = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    for (const auto& idx : batcher.epoch(static_cast<std::uint64_t>(epoch))) {
      ps.zero_grad();
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      double loss = 0.0;
      if (preference) {
        std::vector<PreferenceExample<float>> batch;
        std::vector<std::pair<double, double>> ref;
        for (auto i : idx) {
          if (!teacher_lp[i]) {
            teacher_lp[i] = {sequence_logprob(*teacher, pairs[i].chosen), sequence_logprob(*teacher, pairs[i].rejected)};
          }
          batch.push_back(pairs[i]);
          ref.push_back(*teacher_lp[i]);
        }
        loss = dpo_loss_backward(student, *teacher, std::span<const PreferenceExample<float>>(batch), spec.beta,
                                 std::span<const std::pair<double, double>>(ref))
                   .loss;
      } else {
        const auto batch = data::padded_batch<float>(examples, idx);
        for (std::size_t b = 0; b < batch.size(); ++b) {
          const auto& ex = batch[b];
          const auto tr = student.forward(ex.pixels, ex.tokens);
          LossGrad<float> lg;
          if (spec.objective == Objective::CE) {
            lg = init_ce_loss(tr.logits, ex.targets, ex.mask);
          } else {
            auto& cached = teacher_logits[idx[b]];
            if (!cached) {
              const auto& raw = examples[idx[b]];
              cached = teacher->logits(raw.pixels, raw.tokens);
            }
            const Mat<float> t_logits = detail::pad_rows(*cached, tr.logits.rows());
            lg = spec.objective == Objective::KL ? kd_kl_loss(tr.logits, t_logits, ex.mask)
                                                 : d2s_loss(tr.logits, t_logits, ex.targets, ex.mask, spec.kl_weight);
          }
          loss += lg.value * inv_b;
          student.backward(tr, lg.dlogits * static_cast<float>(inv_b));
        }
      }
      check(std::isfinite(loss), ErrorCode::NumericError, "non-finite training loss");
      const double lr = lr_at(step + 1, total, spec.lr, spec.warmup_ratio);
      opt.step(ps, lr);
      ++step;
      report.add(step_offset + step, "loss", loss);
      report.add(step_offset + step, "lr", lr);
      if (spec.eval_every > 0 && step % spec.eval_every == 0 && step != total) evaluate(step_offset + step);
    }
  }
  evaluate(step_offset + total);
  for (auto& p : ps) p.trainable = false;
  return report;
}

inline std::int64_t stage_steps(const StageConfig& s, std::size_t n) {
  return static_cast<std::int64_t>((n + s.batch_size - 1) / s.batch_size) * s.epochs;
}

inline std::size_t dataset_size(const Dataset& d) {
  return std::visit([](const auto& v) { return v.size(); }, d);
}

// One stage of the progressive schedule with its freeze contract enforced.
inline MetricsReport run_stage(Model<float>& student, const Model<float>* teacher, const StageConfig& stage,
                               const Dataset& dataset, const EvalSets* eval = nullptr, std::int64_t step_offset = 0) {
  stage.validate();
  const auto groups = param_groups(student);
  for (auto g : stage.trainable_groups) {
    check(!groups.empty(g), ErrorCode::StageOrderError,
          std::string("stage ") + std::string(stage_name(stage.kind)) + " needs parameter group " +
              std::string(group_name(g)) + ", which the model does not have");
  }
  if (stage.objective != Objective::CE) {
    check(teacher != nullptr, ErrorCode::TeacherUnavailable, "stage needs a frozen teacher");
    check(teacher->config().vocab_size == student.config().vocab_size, ErrorCode::ShapeError,
          "teacher and student must share a vocabulary");
  }
  TrainSpec spec;
  spec.objective = stage.objective;
  spec.trainable = groups_predicate(stage.trainable_groups);
  spec.lr = stage.lr;
  spec.batch_size = stage.batch_size;
  spec.epochs = stage.epochs;
  spec.warmup_ratio = stage.warmup_ratio;
  spec.seed = stage.seed;
  spec.kl_weight = stage.kl_weight;
  spec.beta = stage.beta;
  spec.adam.grad_clip = stage.grad_clip;
  spec.eval_every = stage.eval_every;
  return train(student, teacher, spec, dataset, eval, step_offset);
}

// --- plans ----------------------------------------------------------------------

struct StagePlan {
  ModelConfig student;
  MoeShape upcycle{4, 2};
  std::vector<StageConfig> stages;

  // Stages must appear in Init -> D2D -> D2S -> PD order, each at most once.
  void validate() const {
    check(!stages.empty(), ErrorCode::StageOrderError, "plan has no stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      stages[i].validate();
      if (i > 0) {
        check(static_cast<int>(stages[i].kind) > static_cast<int>(stages[i - 1].kind), ErrorCode::StageOrderError,
              std::string("stage ") + std::string(stage_name(stages[i].kind)) + " cannot follow " +
                  std::string(stage_name(stages[i - 1].kind)));
      }
    }
    if (std::any_of(stages.begin(), stages.end(), [](const auto& s) { return stage_is_sparse(s.kind); })) {
      check(upcycle.n_experts >= 1 && upcycle.top_k >= 1 && upcycle.top_k <= upcycle.n_experts, ErrorCode::InvalidK,
            "upcycle needs 1 <= k <= N");
    }
  }
};

struct StageResult {
  StageConfig stage;
  MetricsReport report;
  std::uint64_t initial_hash = 0;
  std::uint64_t final_hash = 0;
  bool upcycled_before = false;
  std::filesystem::path checkpoint;
};

struct PlanResult {
  Model<float> model;
  MetricsReport report;  // consolidated, metric names prefixed "<stage>/"
  std::vector<StageResult> stages;
};

// Observer invoked with (stage index, model before, model after).
using StageObserver = std::function<void(std::size_t, const Model<float>&, const Model<float>&)>;

inline PlanResult execute_plan(const StagePlan& plan, const DataRegistry& registry, const Model<float>* teacher,
                               const EvalSets* eval = nullptr, const std::filesystem::path& out_dir = {},
                               const StageObserver& observer = {}) {
  check(teacher != nullptr, ErrorCode::TeacherUnavailable, "no teacher checkpoint");
  plan.validate();
  check(teacher->config().vocab_size == plan.student.vocab_size, ErrorCode::InvalidConfig,
        "teacher and student must share a vocabulary");
  const auto teacher_hash = model_hash(*teacher);

  PlanResult result{Model<float>(plan.student), {}, {}};
  check(teacher->params().total_numel() > result.model.params().total_numel(), ErrorCode::InvalidConfig,
        "teacher must be strictly larger than the student");
  std::int64_t step = 0;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const auto& stage = plan.stages[i];
    auto it = registry.find(stage.dataset_id);
    check(it != registry.end(), ErrorCode::InvalidConfig, "unknown dataset '" + stage.dataset_id + "'");
    StageResult sr;
    sr.stage = stage;
    if (stage_is_sparse(stage.kind) && !result.model.is_sparse()) {
      result.model = upcycle(result.model, plan.upcycle.n_experts, plan.upcycle.top_k);
      sr.upcycled_before = true;
    }
    const Model<float> before = result.model;
    sr.initial_hash = model_hash(result.model);
    sr.report = run_stage(result.model, teacher, stage, it->second, eval, step);
    step += stage_steps(stage, dataset_size(it->second));
    sr.final_hash = model_hash(result.model);
    result.report.append(sr.report, std::string(stage_name(stage.kind)) + "/");
    if (!out_dir.empty()) {
      sr.checkpoint = out_dir / ("stage_" + std::to_string(i + 1) + ".ckpt");
      save_checkpoint(sr.checkpoint, result.model, step);
    }
    if (observer) observer(i, before, result.model);
    result.stages.push_back(std::move(sr));
  }
  check(model_hash(*teacher) == teacher_hash, ErrorCode::InvalidConfig, "teacher parameters changed during the plan");
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc) << result.report.to_csv();
    std::ofstream(out_dir / "summary.json", std::ios::binary | std::ios::trunc) << result.report.summary().dump(2) << '\n';
  }
  return result;
}

// --- teacher ----------------------------------------------------------------------

struct TeacherConfig {
  ModelConfig model{.vocab_size = 33, .d_model = 64, .n_layers = 2, .n_heads = 4, .d_ff = 128, .max_seq = 32,
                    .n_image_tokens = 16, .d_vision = 24, .patch_dim = 17, .d_adaptor = 64, .seed = 7};
  double lr = 3e-3;
  std::size_t batch_size = 32;
  std::int64_t max_steps = 8000;
  std::int64_t eval_every = 250;
  double warmup_ratio = 0.03;
  double threshold = 0.95;
  std::uint64_t seed = 7;
};

struct TeacherResult {
  Model<float> model;
  std::int64_t steps = 0;
  double accuracy = 0.0;
  MetricsReport report;
};

// Plain CE on every non-vision parameter until held-out greedy accuracy
// reaches the threshold.
inline TeacherResult train_teacher(const TeacherConfig& cfg, std::span<const data::Sample> train_set,
                                   std::span<const data::Sample> heldout) {
  check(!train_set.empty() && !heldout.empty(), ErrorCode::EmptyEval, "teacher needs training and held-out data");
  TeacherResult res{Model<float>(cfg.model), 0, 0.0, {}};
  auto& ps = res.model.params();
  for (auto& p : ps) p.trainable = p.group != ParamGroup::Chi;
  Adam<float> opt(ps);
  std::vector<Example<float>> examples;
  for (const auto& s : train_set) examples.push_back(data::make_example<float>(s));
  data::Batcher batcher(examples.size(), cfg.batch_size, cfg.seed);
  std::int64_t step = 0;
  for (std::uint64_t epoch = 0; step < cfg.max_steps; ++epoch) {
    for (const auto& idx : batcher.epoch(epoch)) {
      if (step >= cfg.max_steps) break;
      ps.zero_grad();
      const auto batch = data::padded_batch<float>(examples, idx);
      double loss = 0.0;
      for (const auto& ex : batch) {
        const auto tr = res.model.forward(ex.pixels, ex.tokens);
        auto lg = init_ce_loss(tr.logits, ex.targets, ex.mask);
        loss += lg.value / static_cast<double>(batch.size());
        res.model.backward(tr, lg.dlogits / static_cast<float>(batch.size()));
      }
      check(std::isfinite(loss), ErrorCode::NumericError, "non-finite teacher loss");
      opt.step(ps, lr_at(step + 1, cfg.max_steps, cfg.lr, cfg.warmup_ratio));
      ++step;
      res.report.add(step, "loss", loss);
      if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
        res.accuracy = eval_accuracy(greedy_policy(res.model), heldout);
        res.report.add(step, "accuracy", res.accuracy);
        if (res.accuracy >= cfg.threshold) {
          res.steps = step;
          for (auto& p : ps) p.trainable = false;
          return res;
        }
      }
    }
  }
  throw Error(ErrorCode::TeacherTrainingFailed, "held-out accuracy " + std::to_string(res.accuracy) + " below " +
                                                    std::to_string(cfg.threshold) + " after " +
                                                    std::to_string(cfg.max_steps) + " steps");
}

struct TeacherJob {
  TeacherConfig config;
  std::uint64_t train_seed = 1;
  std::size_t train_n = 20000;
  std::uint64_t heldout_seed = 2;
  std::size_t heldout_n = 400;
};

inline TeacherJob teacher_job_from_json(const nlohmann::json& j) {
  try {
    TeacherJob job;
    auto& c = job.config;
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    c.lr = detail::get_or(j, "lr", c.lr);
    c.batch_size = detail::get_or(j, "batch_size", c.batch_size);
    c.max_steps = detail::get_or(j, "max_steps", c.max_steps);
    c.eval_every = detail::get_or(j, "eval_every", c.eval_every);
    c.warmup_ratio = detail::get_or(j, "warmup_ratio", c.warmup_ratio);
    c.threshold = detail::get_or(j, "threshold", c.threshold);
    c.seed = detail::get_or(j, "seed", c.seed);
    c.model.seed = c.seed;
    if (j.contains("train")) {
      job.train_seed = detail::get_or(j.at("train"), "seed", job.train_seed);
      job.train_n = detail::get_or(j.at("train"), "n", job.train_n);
    }
    if (j.contains("heldout")) {
      job.heldout_seed = detail::get_or(j.at("heldout"), "seed", job.heldout_seed);
      job.heldout_n = detail::get_or(j.at("heldout"), "n", job.heldout_n);
    }
    c.model.validate();
    check(c.lr > 0.0 && c.max_steps > 0 && c.eval_every > 0 && c.batch_size > 0, ErrorCode::InvalidConfig,
          "teacher lr, batch_size, max_steps and eval_every must be positive");
    return job;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed teacher config: ") + e.what());
  }
}

inline Model<float> load_teacher(const std::filesystem::path& path) {
  check(!path.empty() && std::filesystem::exists(path), ErrorCode::TeacherUnavailable,
        "teacher checkpoint '" + path.string() + "' not found");
  return load_checkpoint(path).model;
}

// --- plan files -------------------------------------------------------------------

struct DatasetSpec {
  bool pairs = false;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  data::TaskMix mix;
  data::CorruptionMix corruptions;
  std::filesystem::path path;  // when set, records are read from JSONL instead of generated
};

struct EvalSpec {
  std::uint64_t seed = 1000;
  std::size_t heldout = 200;
  std::size_t probes = 200;
  double beta = 0.1;
};

struct PlanFile {
  std::uint64_t seed = 0;
  std::filesystem::path teacher;
  StagePlan plan;
  std::map<std::string, DatasetSpec> datasets;
  EvalSpec eval;
};

// Curriculum defaults per stage id: caption only, caption + conversation,
// all four tasks, preference pairs.
inline DatasetSpec default_dataset(std::string_view id, std::uint64_t seed) {
  using data::TaskTag;
  DatasetSpec d;
  d.seed = seed;
  d.n = 2000;
  if (id == "init") {
    d.mix = {{TaskTag::Caption, 1.0}};
  } else if (id == "d2d") {
    d.mix = {{TaskTag::Caption, 0.5}, {TaskTag::Count, 0.25}, {TaskTag::Compare, 0.25}};
  } else if (id == "d2s") {
    d.mix = data::uniform_mix();
  } else if (id == "pd") {
    d.pairs = true;
    d.corruptions = data::uniform_corruption_mix();
  } else {
    throw Error(ErrorCode::InvalidConfig, "dataset '" + std::string(id) + "' has no default; describe it under \"datasets\"");
  }
  return d;
}

inline StageConfig stage_from_json(const nlohmann::json& j, std::uint64_t default_seed) {
  auto s = StageConfig::defaults(parse_stage(j.at("kind").get<std::string>()));
  s.lr = detail::get_or(j, "lr", s.lr);
  s.batch_size = detail::get_or(j, "batch_size", s.batch_size);
  s.epochs = detail::get_or(j, "epochs", s.epochs);
  s.warmup_ratio = detail::get_or(j, "warmup_ratio", s.warmup_ratio);
  s.dataset_id = detail::get_or(j, "dataset_id", s.dataset_id);
  s.seed = detail::get_or(j, "seed", default_seed);
  s.kl_weight = detail::get_or(j, "kl_weight", s.kl_weight);
  s.beta = detail::get_or(j, "beta", s.beta);
  s.grad_clip = detail::get_or(j, "grad_clip", s.grad_clip);
  s.eval_every = detail::get_or(j, "eval_every", s.eval_every);
  if (j.contains("objective")) s.objective = parse_objective(j.at("objective").get<std::string>());
  if (j.contains("trainable_groups")) {
    s.trainable_groups.clear();
    for (const auto& g : j.at("trainable_groups")) s.trainable_groups.push_back(parse_group(g.get<std::string>()));
  }
  return s;
}

inline nlohmann::json stage_to_json(const StageConfig& s) {
  nlohmann::json groups = nlohmann::json::array();
  for (auto g : s.trainable_groups) groups.push_back(std::string(group_name(g)));
  return {{"kind", std::string(stage_name(s.kind))},
          {"trainable_groups", groups},
          {"objective", std::string(objective_name(s.objective))},
          {"lr", s.lr},
          {"batch_size", s.batch_size},
          {"epochs", s.epochs},
          {"warmup_ratio", s.warmup_ratio},
          {"dataset_id", s.dataset_id},
          {"seed", s.seed},
          {"kl_weight", s.kl_weight},
          {"beta", s.beta},
          {"grad_clip", s.grad_clip},
          {"eval_every", s.eval_every}};
}

inline DatasetSpec dataset_from_json(const std::string& id, const nlohmann::json& j, std::uint64_t seed,
                                     const std::filesystem::path& base_dir) {
  const bool known = id == "init" || id == "d2d" || id == "d2s" || id == "pd";
  DatasetSpec d = known ? default_dataset(id, seed) : DatasetSpec{};
  if (j.contains("type")) {
    const auto t = j.at("type").get<std::string>();
    check(t == "samples" || t == "pairs", ErrorCode::InvalidConfig, "dataset type must be samples or pairs");
    d.pairs = t == "pairs";
  }
  d.seed = detail::get_or(j, "seed", d.seed);
  d.n = detail::get_or(j, "n", d.n);
  if (j.contains("mix")) {
    d.mix.clear();
    for (const auto& [k, v] : j.at("mix").items()) d.mix[data::parse_tag(k)] = v.get<double>();
  }
  if (j.contains("corruptions")) {
    d.corruptions.clear();
    for (const auto& [k, v] : j.at("corruptions").items()) d.corruptions[data::parse_corruption(k)] = v.get<double>();
  }
  if (j.contains("path")) {
    d.path = j.at("path").get<std::string>();
    if (d.path.is_relative()) d.path = base_dir / d.path;
  }
  check(!d.path.empty() || d.n > 0, ErrorCode::InvalidConfig, "dataset '" + id + "' needs n > 0 or a path");
  if (d.path.empty() && !d.pairs) data::detail::validate_mix(d.mix);
  if (d.path.empty() && d.pairs) data::detail::validate_mix(d.corruptions);
  return d;
}

// Top-level seed seeds the student initialization and, unless a stage names its
// own, each stage's shuffling (seed + stage index).
inline PlanFile plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {},
                               std::optional<std::uint64_t> seed_override = std::nullopt) {
  try {
    PlanFile pf;
    pf.seed = seed_override ? *seed_override : detail::get_or<std::uint64_t>(j, "seed", 0);
    if (j.contains("teacher")) {
      pf.teacher = j.at("teacher").get<std::string>();
      if (pf.teacher.is_relative()) pf.teacher = base_dir / pf.teacher;
    }
    if (j.contains("student")) pf.plan.student = j.at("student").get<ModelConfig>();
    pf.plan.student.seed = pf.seed;
    if (j.contains("upcycle")) {
      pf.plan.upcycle.n_experts = j.at("upcycle").at("n_experts").get<std::size_t>();
      pf.plan.upcycle.top_k = j.at("upcycle").at("top_k").get<std::size_t>();
    }
    const auto& stages = j.at("stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      pf.plan.stages.push_back(stage_from_json(stages[i], pf.seed + i + 1));
    }
    const nlohmann::json no_datasets = nlohmann::json::object();
    const auto& ds = j.contains("datasets") ? j.at("datasets") : no_datasets;
    for (std::size_t i = 0; i < pf.plan.stages.size(); ++i) {
      const auto& id = pf.plan.stages[i].dataset_id;
      if (pf.datasets.contains(id)) continue;
      const nlohmann::json empty = nlohmann::json::object();
      pf.datasets[id] = dataset_from_json(id, ds.contains(id) ? ds.at(id) : empty, 100 + i, base_dir);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      pf.eval.seed = detail::get_or(e, "seed", pf.eval.seed);
      pf.eval.heldout = detail::get_or(e, "heldout", pf.eval.heldout);
      pf.eval.probes = detail::get_or(e, "probes", pf.eval.probes);
      pf.eval.beta = detail::get_or(e, "beta", pf.eval.beta);
    }
    pf.plan.validate();
    return pf;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed plan: ") + e.what());
  }
}

inline PlanFile load_plan(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  check(in.good(), ErrorCode::InvalidConfig, "cannot read plan '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed plan: ") + e.what());
  }
  return plan_from_json(j, path.parent_path(), seed_override);
}

inline Dataset materialize(const DatasetSpec& d) {
  if (!d.path.empty()) {
    if (d.pairs) return data::read_pairs_jsonl(d.path);
    return data::read_samples_jsonl(d.path);
  }
  if (d.pairs) return data::gen_preference_pairs(d.seed, d.n, d.corruptions);
  return data::gen_samples(d.seed, d.n, d.mix);
}

inline DataRegistry build_registry(const PlanFile& pf) {
  DataRegistry reg;
  for (const auto& [id, spec] : pf.datasets) reg.emplace(id, materialize(spec));
  return reg;
}

inline EvalSets build_eval_sets(const EvalSpec& e) {
  const auto heldout = data::gen_samples(e.seed, e.heldout, data::uniform_mix());
  const auto probes = data::gen_preference_pairs(e.seed + 1, e.probes, data::uniform_corruption_mix());
  return EvalSets::build(heldout, probes, e.beta);
}

}  // namespace tinymoe
