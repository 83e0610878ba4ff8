// cloc: generate ordinal data, train, evaluate, export embeddings, self-check.

#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cloc/cli.hpp"

namespace {

int dispatch(int argc, char** argv) {
  using namespace cloc::cli;
  const std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Ordinal classification with learned cumulative margins"};
  app.set_version_flag("--version", std::string(cloc::kVersion));
  app.require_subcommand(1);

  GenOptions gen;
  gen.argv = args;
  std::string bias;
  auto* g = app.add_subcommand("gen", "Generate a synthetic ordinal dataset as CSV");
  g->add_option("--spec", gen.spec_path, "Synthetic spec JSON")->required();
  g->add_option("--out", gen.out_path, "Output CSV")->required();
  g->add_option("--bias", bias, "Bias spec JSON (boundary, p_up, p_down, seed)");

  TrainOptions train;
  train.argv = args;
  std::string config, validation, mode;
  std::uint64_t seed = 0;
  std::size_t max_epochs = 0;
  auto* t = app.add_subcommand("train", "Two-phase training");
  t->add_option("--data", train.data_path, "Training CSV")->required();
  t->add_option("--out", train.out_dir, "Output directory")->required();
  t->add_option("--config", config, "TrainConfig JSON");
  t->add_option("--validation", validation, "Held-out CSV for phase2_monitor=validation_accuracy");
  auto* seed_opt = t->add_option("--seed", seed, "Overrides the config seed");
  t->add_option("--margin-mode", mode, "per_pair | single | fixed:<v>");
  t->add_option("--fix-margin", train.fix_margins, "<boundary>=<value>, boundaries numbered from 1")
      ->allow_extra_args(false);
  auto* epochs_opt = t->add_option("--max-epochs", max_epochs, "Overrides max_epochs");
  t->add_flag("--phase1-only", train.phase1_only, "Skip phase two");
  t->add_flag("--no-precautions", train.no_precautions, "ReLU margins, init near 0, no phase-one early stop");
  t->add_flag("--verbose", train.verbose, "Per-epoch progress on stderr");

  EvalOptions eval;
  std::string normalization = "pair_mass";
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
  e->add_option("--checkpoint", eval.checkpoint_path)->required();
  e->add_option("--data", eval.data_path)->required();
  e->add_option("--boundary-normalization", normalization, "pair_mass | sample_count");
  e->add_flag("--clean-labels", eval.use_clean_labels, "Score against the clean_label column");

  ExportOptions exp;
  exp.argv = args;
  auto* x = app.add_subcommand("export", "Write embeddings and a 2-D principal projection");
  x->add_option("--checkpoint", exp.checkpoint_path)->required();
  x->add_option("--data", exp.data_path)->required();
  x->add_option("--out", exp.out_path)->required();

  CheckOptions check;
  auto* c = app.add_subcommand("check", "Gradient and loss-oracle self-verification");
  c->add_option("--configs", check.gradient_configurations, "Gradient-check configurations");
  c->add_option("--batches", check.oracle_batches, "Oracle batches");
  c->add_option("--seed", check.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kBadInput;
  }

  if (*g) {
    if (!bias.empty()) gen.bias_path = bias;
    return guarded([&] { cmd_gen(gen); });
  }
  if (*t) {
    if (!config.empty()) train.config_path = config;
    if (!validation.empty()) train.validation_path = validation;
    if (!mode.empty()) train.margin_mode = mode;
    if (*seed_opt) train.seed = seed;
    if (*epochs_opt) train.max_epochs = max_epochs;
    return guarded([&] { cmd_train(train); });
  }
  if (*e) {
    return guarded([&] {
      eval.normalization = cloc::parse_boundary_normalization(normalization);
      cmd_eval(eval);
    });
  }
  if (*x) return guarded([&] { cmd_export(exp); });
  if (*c) {
    bool ok = false;
    const int code = guarded([&] { ok = cmd_check(check); });
    return code != kOk ? code : (ok ? kOk : kRuntimeFailure);
  }
  return kBadInput;
}

}  // namespace

int main(int argc, char** argv) { return dispatch(argc, argv); }
