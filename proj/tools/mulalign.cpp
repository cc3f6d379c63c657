// Copyright 2026 The MulAlign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

// mulalign: gen-data | train | eval | gradcheck | ablate
//
// Exit codes: 0 success, 1 usage, 2 runtime failure, 3 divergence.

#include <CLI11.hpp>

#include <iostream>

#include "mulalign/cli.hpp"

using namespace mulalign;

namespace {

// Flags shared by the commands that resolve a RunConfig.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> direct;  // flag-backed keys

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key = value config file");
    cmd->add_option("--set", sets, "override one config key (key=value), repeatable");
  }

  // Registers --<flag> as a shortcut for config key `key`.
  void shortcut(CLI::App* cmd, const std::string& flag, const std::string& key,
                const std::string& help) {
    cmd->add_option_function<std::string>(
        "--" + flag, [this, key](const std::string& v) { direct[key] = v; }, help);
  }

  RunConfig resolve() const {
    RunConfig cfg;
    std::set<std::string> keys;
    if (!config_path.empty())
      keys = apply_config_text(cfg, read_text_file(config_path), config_path);
    for (const auto& [k, v] : direct) {
      cfg.set(k, v);
      keys.insert(k);
    }
    for (const auto& k : apply_overrides(cfg, sets)) keys.insert(k);
    apply_seed_env(cfg, keys);
    cfg.validate();
    return cfg;
  }
};

void add_common_shortcuts(ConfigFlags& f, CLI::App* cmd) {
  f.shortcut(cmd, "variant", "variant", "objective variant");
  f.shortcut(cmd, "lambda-w", "lambda_w", "weight of the word-patch term");
  f.shortcut(cmd, "lambda-s", "lambda_s", "weight of the subcaption-patch term");
  f.shortcut(cmd, "epochs", "epochs", "training epochs");
  f.shortcut(cmd, "batch-size", "batch_size", "batch size");
  f.shortcut(cmd, "lr-backbone", "lr_backbone", "encoder learning rate");
  f.shortcut(cmd, "lr-refinement", "lr_refinement", "calibrator/head/loss-scalar learning rate");
  f.shortcut(cmd, "warmup", "warmup_steps", "linear warm-up steps");
  f.shortcut(cmd, "seed", "seed", "model seed");
  f.shortcut(cmd, "precision", "precision", "float32 or float64");
  f.shortcut(cmd, "out", "out_dir", "output directory");
  f.shortcut(cmd, "probe-k", "probe_k", "negatives per probe group");
  f.shortcut(cmd, "probe-groups", "probe_groups", "probe groups per difficulty level");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level image-text alignment on synthetic scenes"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus file");
  CorpusConfig gen_cfg;
  std::string gen_out = "corpus.jsonl";
  gen->add_option("--n", gen_cfg.n, "number of samples")->capture_default_str();
  gen->add_option("--seed", gen_cfg.seed, "corpus seed")->capture_default_str();
  gen->add_option("--grid", gen_cfg.grid, "grid cells per side")->capture_default_str();
  gen->add_option("--patch-size", gen_cfg.patch_size, "pixels per cell side")->capture_default_str();
  gen->add_option("--max-objects", gen_cfg.max_objects, "objects per scene")->capture_default_str();
  gen->add_option("--max-sentences", gen_cfg.max_sentences, "subcaption cap")->capture_default_str();
  gen->add_option("--out", gen_out, "output path")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train one model");
  ConfigFlags train_flags;
  train_flags.add_to(train);
  add_common_shortcuts(train_flags, train);
  TrainOptions train_opt;
  train->add_option("--corpus", train_opt.corpus_path, "corpus file (default: generate)");
  train->add_option("--resume", train_opt.resume_path, "checkpoint to resume from");
  train->add_option("--checkpoint-every", train_opt.checkpoint_every,
                    "checkpoint interval in steps (default: each epoch)");
  bool no_eval = false;
  train->add_flag("--no-eval", no_eval, "skip the held-out evaluation at the end");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  EvalOptions eval_opt;
  std::vector<std::string> eval_sets;
  std::map<std::string, std::string> eval_direct;
  eval->add_option("--checkpoint", eval_opt.checkpoint, "checkpoint file")->required();
  eval->add_option("--corpus", eval_opt.corpus_path, "corpus file (default: regenerate)");
  eval->add_option("--report", eval_opt.report_path, "report path (default: next to checkpoint)");
  eval->add_option("--attention-maps", eval_opt.attention_maps,
                   "export attention maps for the first N held-out samples");
  eval->add_option("--set", eval_sets, "override one stored config key (key=value)");
  eval->add_option_function<std::string>(
      "--probe-k", [&](const std::string& v) { eval_direct["probe_k"] = v; }, "negatives per group");
  eval->add_option_function<std::string>(
      "--probe-groups", [&](const std::string& v) { eval_direct["probe_groups"] = v; },
      "probe groups per level");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  double grad_tol = 1e-4, grad_eps = 1e-5;
  std::string grad_block;
  grad->add_option("--tol", grad_tol, "max relative error")->capture_default_str();
  grad->add_option("--eps", grad_eps, "central-difference step")->capture_default_str();
  grad->add_option("--block", grad_block, "restrict to a module or block name");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and compare several variants");
  ConfigFlags ablate_flags;
  ablate_flags.add_to(ablate);
  add_common_shortcuts(ablate_flags, ablate);
  std::string ablate_variants, ablate_lambdas;
  AblationOptions ablate_opt;
  ablate->add_option("--variants", ablate_variants, "comma-separated variant names");
  ablate->add_option("--seeds", ablate_opt.seeds, "seeds averaged per row")->capture_default_str();
  ablate->add_option("--tie-lambdas", ablate_lambdas,
                     "comma-separated values, each setting lambda_w = lambda_s");
  ablate->add_option("--corpus", ablate_opt.corpus_path, "corpus file (default: generate)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      cmd_gen_data(gen_cfg, gen_out, std::cout);
      return kExitOk;
    }
    if (train->parsed()) {
      const RunConfig cfg = train_flags.resolve();
      train_opt.evaluate_at_end = !no_eval;
      const TrainSummary s = with_precision(cfg, [&]<class T>() {
        return run_training<T>(cfg, train_opt, std::cout);
      });
      std::cout << "outputs in " << cfg.out_dir << "\n";
      return s.diverged ? kExitDivergence : kExitOk;
    }
    if (eval->parsed()) {
      const Checkpoint ck = load_checkpoint(eval_opt.checkpoint);
      std::vector<std::string> overrides;
      for (const auto& [k, v] : eval_direct) overrides.push_back(k + "=" + v);
      overrides.insert(overrides.end(), eval_sets.begin(), eval_sets.end());
      const RunConfig cfg = config_from_checkpoint(ck, overrides);
      with_precision(cfg, [&]<class T>() { return run_eval<T>(cfg, ck, eval_opt, std::cout); });
      return kExitOk;
    }
    if (grad->parsed()) {
      if (!(grad_tol > 0) || !(grad_eps > 0)) throw UsageError("--tol and --eps must be positive");
      const auto rows = cmd_gradcheck(grad_tol, grad_eps, grad_block, std::cout);
      const bool ok = std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.report.passed; });
      return ok ? kExitOk : kExitRuntime;
    }
    if (ablate->parsed()) {
      const RunConfig cfg = ablate_flags.resolve();
      ablate_opt.variants = split_list(ablate_variants);
      for (const auto& v : split_list(ablate_lambdas)) {
        RunConfig probe;
        probe.set("lambda_w", v);
        ablate_opt.tie_lambdas.push_back(probe.lambda_w);
      }
      const auto rows = with_precision(cfg, [&]<class T>() {
        return run_ablation<T>(cfg, ablate_opt, std::cout);
      });
      const std::string table = format_ablation_table(rows);
      std::cout << "\n" << table;
      std::filesystem::create_directories(cfg.out_dir);
      std::ofstream(join_path(cfg.out_dir, "config.txt")) << cfg.to_text();
      std::ofstream(join_path(cfg.out_dir, "ablation.txt")) << table;
      std::ofstream jl(join_path(cfg.out_dir, "ablation.jsonl"));
      bool diverged = false;
      for (const auto& r : rows) {
        jl << to_json(r).dump() << '\n';
        for (const auto& run : r.runs) diverged = diverged || run.diverged;
      }
      std::cout << "outputs in " << cfg.out_dir << "\n";
      return diverged ? kExitDivergence : kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
