#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "tinymoe/tinymoe.hpp"

namespace fs = std::filesystem;
using namespace tinymoe;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidMix:
    case ErrorCode::InvalidK:
    case ErrorCode::InvalidBeta:
    case ErrorCode::InvalidSchedule:
    case ErrorCode::StageOrderError:
    case ErrorCode::UnknownSymbol:
    case ErrorCode::SequenceTooLong:
      return 2;
    case ErrorCode::TeacherUnavailable:
    case ErrorCode::CheckpointError:
      return 3;
    case ErrorCode::NumericError:
      return 4;
    default:
      return 1;
  }
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  check(in.good(), ErrorCode::InvalidConfig, "cannot read config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "malformed config '" + path.string() + "': " + e.what());
  }
}

void write_text(const fs::path& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  check(f.good(), ErrorCode::InvalidConfig, "cannot write '" + out.string() + "'");
  f << text;
}

std::vector<Metric> parse_metrics(const std::string& m) {
  if (m == "all") return {kAllMetrics.begin(), kAllMetrics.end()};
  if (m == "kl") return {Metric::Kl};
  if (m == "acc") return {Metric::Acc};
  if (m == "hall") return {Metric::Hall};
  if (m == "util") return {Metric::Util};
  if (m == "margin") return {Metric::Margin};
  throw Error(ErrorCode::InvalidConfig, "unknown metric '" + m + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale progressive distillation of a mixture-of-experts multimodal student"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string config, out, ckpt, teacher_path, metric = "all", input, format = "csv";
  std::size_t n = 1000;
  bool pairs = false;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as JSON lines");
  gen->add_option("--seed", seed, "generator seed (default 0)");
  gen->add_option("--n", n, "number of records")->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "output path (stdout when omitted)");
  gen->add_option("--config", config, "dataset spec JSON: {type, n, seed, mix | corruptions}");
  gen->add_flag("--pairs", pairs, "emit preference pairs instead of samples");

  auto* tt = app.add_subcommand("train-teacher", "train the teacher until it clears the accuracy bar");
  tt->add_option("--config", config, "teacher config JSON");
  tt->add_option("--seed", seed, "overrides the config seed");
  tt->add_option("--out", out, "checkpoint path")->required();

  auto* rp = app.add_subcommand("run-plan", "run a staged distillation plan");
  rp->add_option("plan", config, "plan JSON")->required();
  rp->add_option("--config", config, "plan JSON (same as the positional argument)");
  rp->add_option("--seed", seed, "overrides the plan seed");
  rp->add_option("--out", out, "output directory (default run)");
  rp->add_option("--teacher", teacher_path, "teacher checkpoint (overrides the plan)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "student checkpoint")->required();
  ev->add_option("--teacher", teacher_path, "teacher checkpoint, needed for kl and margin");
  ev->add_option("--config", config, "plan JSON supplying the teacher and eval set");
  ev->add_option("--seed", seed, "eval-set seed");
  ev->add_option("--metric", metric, "kl, acc, hall, util, margin or all")
      ->check(CLI::IsMember({"kl", "acc", "hall", "util", "margin", "all"}));
  ev->add_option("--out", out, "CSV output path (stdout when omitted)");

  auto* rep = app.add_subcommand("report", "render stored metrics");
  rep->add_option("--in", input, "metrics.csv or a run directory")->required();
  rep->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  rep->add_option("--metric", metric, "restrict to metrics containing this name (all: no filter)");
  rep->add_option("--out", out, "output path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      DatasetSpec spec;
      spec.pairs = pairs;
      spec.n = n;
      spec.seed = seed.value_or(0);
      spec.mix = data::uniform_mix();
      spec.corruptions = data::uniform_corruption_mix();
      if (!config.empty()) {
        auto j = read_json(config);
        spec = dataset_from_json(j.value("id", std::string("custom")), j, spec.seed, fs::path(config).parent_path());
        if (!j.contains("mix") && !spec.pairs) spec.mix = data::uniform_mix();
        if (!j.contains("corruptions") && spec.pairs) spec.corruptions = data::uniform_corruption_mix();
        if (seed) spec.seed = *seed;
      }
      const auto ds = materialize(spec);
      std::ostringstream os;
      std::visit([&](const auto& v) { data::write_jsonl(os, v); }, ds);
      write_text(out, os.str());
      return 0;
    }

    if (*tt) {
      TeacherJob job;
      if (!config.empty()) job = teacher_job_from_json(read_json(config));
      if (seed) job.config.model.seed = job.config.seed = *seed;
      const auto train = data::gen_samples(job.train_seed, job.train_n, data::uniform_mix());
      const auto held = data::gen_samples(job.heldout_seed, job.heldout_n, data::uniform_mix());
      const auto res = train_teacher(job.config, train, held);
      save_checkpoint(out, res.model, res.steps);
      std::fprintf(stderr, "teacher: %lld steps, held-out accuracy %.4f\n", static_cast<long long>(res.steps),
                   res.accuracy);
      return 0;
    }

    if (*rp) {
      const auto pf = load_plan(config, seed);
      const fs::path tpath = teacher_path.empty() ? pf.teacher : fs::path(teacher_path);
      const auto teacher = load_teacher(tpath);
      const auto registry = build_registry(pf);
      const auto eval = build_eval_sets(pf.eval);
      // not a CLI11 default: `out` is shared with the other subcommands
      const fs::path dir = out.empty() ? fs::path("run") : fs::path(out);
      fs::create_directories(dir);
      const auto res = execute_plan(pf.plan, registry, &teacher, &eval, dir);
      std::fprintf(stderr, "final checkpoint hash %016llx\n", static_cast<unsigned long long>(model_hash(res.model)));
      return 0;
    }

    if (*ev) {
      const auto metrics = parse_metrics(metric);
      check(fs::exists(ckpt), ErrorCode::CheckpointError, "checkpoint '" + ckpt + "' not found");
      const auto student = load_checkpoint(ckpt);
      EvalSpec es;
      fs::path tpath = teacher_path;
      if (!config.empty()) {
        const auto pf = load_plan(config);
        es = pf.eval;
        if (tpath.empty()) tpath = pf.teacher;
      }
      if (seed) es.seed = *seed;
      const bool needs_teacher = std::any_of(metrics.begin(), metrics.end(),
                                             [](Metric m) { return m == Metric::Kl || m == Metric::Margin; });
      std::optional<Model<float>> teacher;
      if (needs_teacher) teacher = load_teacher(tpath);
      const auto sets = build_eval_sets(es);
      MetricsReport report;
      evaluate_into(report, student.step, student.model, teacher ? &*teacher : nullptr, sets, metrics);
      write_text(out, report.to_csv());
      return 0;
    }

    if (*rep) {
      fs::path in = input;
      if (fs::is_directory(in)) in /= "metrics.csv";
      std::ifstream f(in);
      check(f.good(), ErrorCode::CheckpointError, "metrics file '" + in.string() + "' not found");
      const auto all = MetricsReport::from_csv(f);
      MetricsReport picked;
      for (const auto& r : all.rows()) {
        if (metric == "all" || r.metric.find(metric) != std::string::npos) picked.add(r.step, r.metric, r.value);
      }
      write_text(out, format == "json" ? picked.summary().dump(2) + "\n" : picked.to_csv());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
