// Copyright 2026 the capseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "capseg/runhub.hpp"

namespace {

using namespace capseg;

runhub::RunConfig load_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!config_path.empty()) kv = runhub::parse_kv_text(io::read_text_file(config_path));
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    config_require(eq != std::string::npos, "override must be key=value: " + ov);
    kv[ov.substr(0, eq)] = ov.substr(eq + 1);
  }
  // the output root can come from the environment
  if (const char* root = std::getenv("CAPSEG_OUT_ROOT"); root && !kv.count("out_dir"))
    kv["out_dir"] = std::string(root);
  return runhub::RunConfig::from_kv(kv);
}

void echo_summary(const io::Csv& summary) {
  for (size_t i = 0; i < summary.header.size(); ++i)
    std::cout << (i ? "," : "") << summary.header[i];
  std::cout << "\n";
  for (const auto& r : summary.rows) {
    for (size_t i = 0; i < r.size(); ++i) std::cout << (i ? "," : "") << r[i];
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptable segmentation with causal prompt calibration"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "flat key=value config file")->capture_default_str();
  app.add_option("--set", overrides, "override config entries, key=value");

  auto* gen = app.add_subcommand("gen-data", "generate and export the synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset directory (default <out_dir>/dataset)");

  auto* train = app.add_subcommand("train", "train one model");
  std::string train_arm = "causal";
  std::uint64_t train_seed = 1;
  train->add_option("--arm", train_arm, "causal|task|learnable|fixed|plug");
  train->add_option("--seed", train_seed, "training seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt;
  double eval_jitter = 0.0;
  std::uint64_t eval_seed = 1;
  std::string eval_out;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint path stem (no .bin)")->required();
  eval->add_option("--jitter", eval_jitter, "prompt jitter for the evaluation");
  eval->add_option("--seed", eval_seed, "seed the checkpoint was trained with");
  eval->add_option("--out", eval_out, "metrics csv path");

  auto* gradcheck = app.add_subcommand("gradcheck", "hypergradient finite-difference oracle");
  int gc_k = 1;
  std::uint64_t gc_seed = 7;
  gradcheck->add_option("--k", gc_k, "inner unroll depth");
  gradcheck->add_option("--seed", gc_seed, "oracle seed");

  auto* audit = app.add_subcommand("audit", "consistency and irrelevance audit of a run");
  std::string audit_run;
  std::uint64_t audit_seed = 1;
  audit->add_option("--run", audit_run, "run directory with checkpoints")->required();
  audit->add_option("--seed", audit_seed, "seed the run was trained with");

  auto* ablate = app.add_subcommand("ablate", "run an ablation family");
  std::string which = "prompt_types";
  ablate->add_option("--which", which,
                     "prompt_types|lambda_en|lambda_xi|rank|nt|schedule|finetune|trainsize|plug");

  auto* plot = app.add_subcommand("plot", "render plots from csv files");
  std::string plot_csv, plot_kind = "curve", plot_out, plot_run;
  plot->add_option("--csv", plot_csv, "input csv");
  plot->add_option("--kind", plot_kind, "curve|bars");
  plot->add_option("--out", plot_out, "output svg");
  plot->add_option("--run", plot_run, "re-export plots for a whole run directory");

  auto* curve = app.add_subcommand("curve", "generalization-curve experiment");
  auto* bias = app.add_subcommand("bias", "prompt-bias experiment");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(config_path, overrides);

    if (*gen) {
      auto ds = synthgen::make_dataset(cfg.dataset);
      const std::string out = gen_out.empty() ? cfg.out_dir + "/dataset" : gen_out;
      synthgen::export_dataset(ds, out);
      std::cout << "dataset written to " << out << "\n";
    } else if (*train) {
      auto out = runhub::train_one(cfg, train_seed, bilevel::arm_from_name(train_arm),
                                   cfg.out_dir + "/train_" + train_arm + "_s" +
                                       std::to_string(train_seed));
      if (out.train.diverged) {
        std::cerr << "training diverged; last good checkpoint kept\n";
        return 3;
      }
      std::cout << "final base dice " << io::fmt_double(out.final_base_dice) << ", target dice "
                << io::fmt_double(out.final_target_dice) << "\n"
                << "run dir: " << out.dir << "\n";
    } else if (*eval) {
      auto data = synthgen::make_dataset(cfg.dataset);
      bilevel::BiLevelConfig bc = cfg.bilevel;
      bc.seed = eval_seed;
      bilevel::Trainer trainer(data, cfg.model, bc);
      trainer.load_checkpoint(eval_ckpt);
      auto base = trainer.evaluate(data.test_base, "base", eval_jitter, mix64(eval_seed));
      auto target = trainer.evaluate(data.test_target, "target", eval_jitter, mix64(eval_seed));
      objectives::MetricsReport all;
      all.rows = base.rows;
      all.rows.insert(all.rows.end(), target.rows.begin(), target.rows.end());
      std::cout << "base dice " << io::fmt_double(base.mean_dice()) << ", target dice "
                << io::fmt_double(target.mean_dice()) << "\n";
      if (!eval_out.empty()) all.to_csv(eval_seed, cfg.model.hash()).save(eval_out);
    } else if (*gradcheck) {
      auto report = bilevel::hypergrad_check(gc_k, gc_seed);
      std::cout << "k=" << report.k_steps << " coords=" << report.n_coords << " max_rel_err="
                << io::fmt_double(report.max_rel_err) << " mean_rel_err="
                << io::fmt_double(report.mean_rel_err) << " seconds="
                << io::fmt_double(report.runtime_seconds) << "\n";
    } else if (*audit) {
      auto report = runhub::run_consistency_audit(cfg, audit_seed, audit_run);
      std::cout << "per-distribution losses:";
      for (double l : report.per_distribution) std::cout << " " << io::fmt_double(l);
      std::cout << "\nspread=" << io::fmt_double(report.spread) << "\n";
      std::cout << "irrelevance corr: init=" << io::fmt_double(report.irrel_corr_init)
                << " trained=" << io::fmt_double(report.irrel_corr_trained) << "\n";
      std::cout << "grad disagreement over snapshots:";
      for (double g : report.grad_disagreement) std::cout << " " << io::fmt_double(g);
      std::cout << "\ntrend slope=" << io::fmt_double(report.trend_slope) << "\n";
    } else if (*ablate) {
      auto result = runhub::run_ablations(cfg, which);
      echo_summary(result.summary);
    } else if (*plot) {
      if (!plot_run.empty()) {
        for (const auto& f : runhub::export_run(plot_run)) std::cout << f << "\n";
      } else {
        config_require(!plot_csv.empty() && !plot_out.empty(),
                       "plot needs --csv and --out (or --run)");
        runhub::render_plot(io::Csv::load(plot_csv), plot_kind, plot_out);
        std::cout << plot_out << "\n";
      }
    } else if (*curve) {
      auto result = runhub::run_generalization_curve(cfg);
      echo_summary(result.summary);
    } else if (*bias) {
      auto result = runhub::run_prompt_bias_study(cfg);
      echo_summary(result.summary);
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
