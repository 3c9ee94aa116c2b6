#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metadock/harness.hpp"

namespace metadock::harness {

namespace {

namespace fs = std::filesystem;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> steps;
  std::optional<int> pretrain_steps;
  std::optional<double> budget;
  std::optional<std::string> mode;
  std::optional<std::string> meta_grad;
  std::optional<int> inner_steps;
  std::optional<int> meta_batch;
  std::optional<int> width;
  std::optional<int> val_tasks;
  std::optional<int> seen_tasks;

  bool touches_hp() const { return steps || budget || mode || meta_grad || inner_steps || meta_batch; }
};

void add_overrides(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "JSON run configuration");
  sub->add_option("--seed", o.seed, "Run seed");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_option("--steps", o.steps, "Meta-training steps (n_outer)");
  sub->add_option("--pretrain-steps", o.pretrain_steps, "Unpruned warm-start steps");
  sub->add_option("--budget", o.budget, "Target budget V0 in (0, 1]");
  sub->add_option("--mode", o.mode, "task-specific | global | unpruned | continuous-baseline");
  sub->add_option("--meta-grad", o.meta_grad, "implicit-cg | first-order");
  sub->add_option("--inner-steps", o.inner_steps, "Inner adaptation steps");
  sub->add_option("--meta-batch", o.meta_batch, "Tasks per meta-step");
  sub->add_option("--width", o.width, "Conv width");
  sub->add_option("--val-tasks", o.val_tasks, "Validation tasks");
  sub->add_option("--seen-tasks", o.seen_tasks, "Meta-train-class tasks used for MO");
}

void apply_hp(const Overrides& o, meta::HyperParams& hp) {
  if (o.steps) hp.n_outer = *o.steps;
  if (o.budget) hp.V0 = *o.budget;
  if (o.mode) hp.pruning_mode = meta::parse_pruning_mode(*o.mode);
  if (o.meta_grad) hp.meta_grad_mode = meta::parse_meta_grad_mode(*o.meta_grad);
  if (o.inner_steps) hp.n_inner = *o.inner_steps;
  if (o.meta_batch) hp.meta_batch = *o.meta_batch;
}

void apply_overrides(const Overrides& o, RunConfig& c) {
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.pretrain_steps) c.pretrain_steps = *o.pretrain_steps;
  if (o.width) c.width = *o.width;
  if (o.val_tasks) c.val_tasks = *o.val_tasks;
  if (o.seen_tasks) c.seen_tasks = *o.seen_tasks;
  apply_hp(o, c.hp);
}

RunConfig build_config(const Overrides& o, ExperimentKind kind) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  c.kind = kind;
  apply_overrides(o, c);
  c.validate();
  return c;
}

/// Without a config file, model, hyperparameters and seed come from the checkpoint.
RunConfig checkpoint_config(const Overrides& o, const Checkpoint& ck) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.config.empty()) {
    c.hp = ck.hp;
    c.width = ck.model.width;
    c.norm = ck.model.norm;
    c.episode.n_way = ck.model.n_way;
    c.episode.image_size = ck.model.image_size;
    c.episode.channels = ck.model.in_channels;
    c.seed = ck.seed;
  }
  c.kind = ExperimentKind::kReport;
  apply_overrides(o, c);
  if (c.model_config() != ck.model) throw std::invalid_argument("checkpoint model does not match the config");
  return c;
}

std::string quote(const std::string& text) {
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out + "\"";
}

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << "error: kind=" << kind << " message=" << quote(message) << '\n';
  return code;
}

std::string summary(const EvalReport& r) {
  return "n_tasks=" + std::to_string(r.n_tasks) + " mean_acc=" + format_double(r.mean_acc) +
         " ci95=" + format_double(r.ci95) + " mo=" + format_double(r.mo) + " meta_budget=" +
         format_double(r.meta_budget) + " task_budget=" + format_double(r.mean_task_budget);
}

void write_methods(const fs::path& dir, const std::string& name, const std::vector<MethodResult>& results) {
  const auto csv = write_csv(methods_csv(results));
  write_text_file(dir / (name + ".csv"), csv);
  for (const auto& r : results) write_text_file(dir / (name + "_" + r.method + ".runlog.jsonl"), r.log.to_jsonl());
  std::cout << csv;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"MetaDOCK: task-specific kernel selection for meta-learning"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, sweep_o, compare_o, report_o, export_o;

  auto* train_cmd = app.add_subcommand("train", "Meta-train and write run log + checkpoint");
  add_overrides(train_cmd, train_o);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_overrides(eval_cmd, eval_o);
  std::string eval_ckpt, eval_tasks;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint manifest")->required();
  eval_cmd->add_option("--tasks", eval_tasks, "all-test | val | N");

  auto* sweep_cmd = app.add_subcommand("sweep", "Train one model per target budget plus unpruned");
  add_overrides(sweep_cmd, sweep_o);
  std::vector<double> budgets;
  sweep_cmd->add_option("--budgets", budgets, "Comma-separated target budgets")->delimiter(',');

  auto* compare_cmd = app.add_subcommand("compare", "Baseline comparison at the configured budget");
  add_overrides(compare_cmd, compare_o);
  std::string baseline;
  compare_cmd->add_option("baseline", baseline, "continuous | global")
      ->required()
      ->check(CLI::IsMember({"continuous", "global"}));

  auto* report_cmd = app.add_subcommand("report", "Kernel-usage or task-pair correlation CSVs");
  add_overrides(report_cmd, report_o);
  std::string report_kind, report_ckpt;
  std::size_t report_tasks = 20, report_pairs = 10, report_layer = 0;
  report_cmd->add_option("kind", report_kind, "kernel-usage | correlation")
      ->required()
      ->check(CLI::IsMember({"kernel-usage", "correlation"}));
  report_cmd->add_option("--checkpoint", report_ckpt, "Checkpoint manifest")->required();
  report_cmd->add_option("--tasks", report_tasks, "Adapted test tasks to inspect (0 = meta-state only)");
  report_cmd->add_option("--pairs", report_pairs, "Task pairs for the correlation report");
  report_cmd->add_option("--layer", report_layer, "Conv layer for the correlation report");

  auto* export_cmd = app.add_subcommand("export-fixture", "Write the configured dataset in raw manifest+blob form");
  add_overrides(export_cmd, export_o);
  std::string export_manifest = "dataset.json";
  export_cmd->add_option("--manifest", export_manifest, "Manifest file name inside the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what(), 2);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      const auto cfg = build_config(train_o, ExperimentKind::kTrain);
      Experiment ex(cfg);
      const fs::path dir = cfg.output_dir;
      auto result = ex.train(ex.pretrained(), cfg.hp, 2);
      write_text_file(dir / "config.json", cfg.to_json());
      write_text_file(dir / "runlog.jsonl", result.log.to_jsonl());
      save_checkpoint(Checkpoint{result.best, cfg.model_config(), cfg.hp, cfg.seed}, dir / "checkpoint.json");
      const double meta_budget = masking::budget(masking::binarize(result.best.z.values));
      std::cout << "ok train steps=" << cfg.hp.n_outer << " best_val="
                << (result.best_val_accuracy ? format_double(*result.best_val_accuracy) : "none")
                << " meta_budget=" << format_double(meta_budget) << " out=" << dir.string() << '\n';
      return 0;
    }
    if (eval_cmd->parsed()) {
      const auto ck = load_checkpoint(eval_ckpt);
      RunConfig cfg = checkpoint_config(eval_o, ck);
      const bool val_only = eval_tasks == "val";
      if (!val_only && !eval_tasks.empty()) cfg.test_tasks = eval_tasks;
      cfg.validate();
      Experiment ex(cfg);
      const fs::path dir = cfg.output_dir;
      if (val_only) {
        if (ex.val_refs().empty()) throw std::invalid_argument("no validation tasks configured");
        const auto s = ex.evaluate_split(ck.state, cfg.hp, tasks::Split::kMetaVal, ex.val_refs());
        EvalReport r;
        r.mean_acc = r.acc_test_unseen = s.mean;
        r.ci95 = s.ci95;
        r.n_tasks = static_cast<int>(s.n);
        r.acc_train_seen = r.mo = std::numeric_limits<double>::quiet_NaN();
        r.meta_budget = masking::budget(masking::binarize(ck.state.z.values)) * 100.0;
        r.mean_task_budget = s.mean_task_budget * 100.0;
        write_text_file(dir / "eval_report.json", r.to_json());
        std::cout << "ok eval split=meta-val " << summary(r) << '\n';
        return 0;
      }
      const auto r = ex.evaluate(ck.state, cfg.hp);
      write_text_file(dir / "eval_report.json", r.to_json());
      std::cout << "ok eval split=meta-test " << summary(r) << '\n';
      return 0;
    }
    if (sweep_cmd->parsed()) {
      const auto cfg = build_config(sweep_o, ExperimentKind::kSweep);
      Experiment ex(cfg);
      const auto rows = ex.budget_sweep(budgets);
      const auto csv = write_csv(sweep_csv(rows));
      write_text_file(fs::path(cfg.output_dir) / "sweep.csv", csv);
      std::cout << csv;
      return 0;
    }
    if (compare_cmd->parsed()) {
      const auto kind = baseline == "continuous" ? ExperimentKind::kCompareContinuous : ExperimentKind::kCompareGlobal;
      const auto cfg = build_config(compare_o, kind);
      Experiment ex(cfg);
      const auto results = baseline == "continuous" ? ex.compare_continuous() : ex.compare_global();
      write_methods(cfg.output_dir, "compare_" + baseline, results);
      return 0;
    }
    if (report_cmd->parsed()) {
      const auto ck = load_checkpoint(report_ckpt);
      RunConfig cfg = checkpoint_config(report_o, ck);
      cfg.test_tasks = std::to_string(std::max<std::size_t>(report_tasks, 2));
      cfg.val_tasks = 0;
      cfg.seen_tasks = 0;
      Experiment ex(cfg);
      const fs::path dir = cfg.output_dir;
      const auto states = ex.adapted_tasks(ck.state, cfg.hp, report_tasks);
      if (report_kind == "kernel-usage") {
        const auto usage = kernel_usage_report(ex.learner().model(), ck.state, states);
        for (const auto& m : usage) {
          write_text_file(dir / ("kernel_usage_layer" + std::to_string(m.layer) + ".csv"), write_csv(usage_csv(m)));
        }
        std::cout << "ok report kind=kernel-usage layers=" << usage.size() << " tasks=" << states.size()
                  << " out=" << dir.string() << '\n';
      } else {
        const auto corr = task_pair_correlation(states, report_layer, report_pairs, cfg.seed);
        write_text_file(dir / "correlation.csv", write_csv(correlation_csv(corr)));
        std::size_t zeros = 0;
        for (int v : corr.values) zeros += v == 0;
        std::cout << "ok report kind=correlation pairs=" << corr.pairs.size() << " channels=" << corr.channels
                  << " zeros=" << zeros << " out=" << dir.string() << '\n';
      }
      return 0;
    }
    if (export_cmd->parsed()) {
      const auto cfg = build_config(export_o, ExperimentKind::kReport);
      auto opts = cfg.dataset.synth;
      opts.image_size = cfg.episode.image_size;
      opts.channels = cfg.episode.channels;
      const auto pools = cfg.dataset.source == "raw" ? tasks::load_raw_dataset(cfg.dataset.manifest)
                                                      : tasks::synth_class_pool(cfg.dataset.seed, opts);
      const auto path = fs::path(cfg.output_dir) / export_manifest;
      const auto bytes = tasks::export_raw_dataset(pools, path);
      std::cout << "ok export-fixture manifest=" << path.string() << " bytes=" << bytes << '\n';
      return 0;
    }
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 3);
  } catch (const std::invalid_argument& e) {
    return fail("config", e.what(), 3);
  } catch (const NumericalError& e) {
    return fail("numerical", e.what(), 4);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 5);
  }
  return fail("usage", "no subcommand", 2);
}

}  // namespace metadock::harness
