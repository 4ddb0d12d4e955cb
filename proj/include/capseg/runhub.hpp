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

#ifndef CAPSEG_RUNHUB_HPP
#define CAPSEG_RUNHUB_HPP

#include "capseg/bilevel.hpp"

namespace capseg::runhub {

// Experiment orchestration: flat key=value configs, per-seed run directories
// with raw CSVs, summary statistics over seeds, and SVG plots rendered purely
// from the CSVs.

struct RunConfig {
  std::string out_dir = "runs/run";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};  // five independent runs
  synthgen::DatasetConfig dataset;
  minisam::ModelConfig model;
  bilevel::BiLevelConfig bilevel;
  double eval_bias_jitter = 0.25;
  int audit_scenes = 200;
  int audit_probe = 16;
  bool warmup_cache = true;  // share warm-up checkpoints between arms per seed

  static RunConfig defaults();
  static RunConfig from_kv(const std::map<std::string, std::string>& kv);
  static RunConfig from_file(const std::string& path);
  std::string to_text() const;  // resolved, deterministic echo
};

std::map<std::string, std::string> parse_kv_text(const std::string& text);

// one training run; writes config.txt, epochs.csv, checkpoints, metrics csv
struct RunOutput {
  bilevel::TrainResult train;
  std::string dir;
  double final_target_dice = 0.0;
  double final_base_dice = 0.0;
  double wall_seconds = 0.0;
};
RunOutput train_one(const RunConfig& cfg, std::uint64_t seed, bilevel::Arm arm,
                    const std::string& dir, const synthgen::DatasetSplit* shared_data = nullptr);

io::Csv epochs_to_csv(const bilevel::TrainResult& result, int n_t);

struct ExperimentResult {
  std::string name;
  io::Csv summary;
  std::vector<std::string> files;  // every CSV/plot written
};

// per-epoch base/target dice with and without the prompt learner, paired
// seeds; emits gen_curve.csv (4 series) and gen_curve.svg
ExperimentResult run_generalization_curve(const RunConfig& cfg);

// clean vs biased prompts on the target split for a trained model, plus the
// per-entity dice spread under each prompt regime
ExperimentResult run_prompt_bias_study(const RunConfig& cfg);

// which: prompt_types | lambda_en | lambda_xi | rank | nt | schedule |
//        finetune | trainsize | plug
ExperimentResult run_ablations(const RunConfig& cfg, const std::string& which);

std::string warmup_cache_stem(const RunConfig& cfg, std::uint64_t seed);

struct ConsistencyAudit {
  std::vector<double> per_distribution;
  double spread = 0.0;  // max_i |L_i - mean| / mean
  double irrel_corr_init = 0.0;
  double irrel_corr_trained = 0.0;
  std::vector<double> grad_disagreement;  // one value per snapshot
  double trend_slope = 0.0;               // least-squares slope over snapshots
};
// run_dir must hold checkpoints/snapshots written by train_one with cfg
ConsistencyAudit run_consistency_audit(const RunConfig& cfg, std::uint64_t seed,
                                       const std::string& run_dir);

// mean absolute pearson correlation between reweighted prompt coordinates
// and the irrelevant factor record (scene factors + prompt jitter factors)
double irrelevance_correlation(const minisam::Model& model, const capl::Capl& cp, bool use_gates,
                               const synthgen::ClassVocabulary& vocab,
                               const synthgen::GeneratorConfig& geom, int n_scenes, double jitter,
                               std::uint64_t seed);

// deterministic SVG rendering; kind: curve | bars
void render_plot(const io::Csv& csv, const std::string& kind, const std::string& out_path);

// re-emit summary CSVs and plots from the raw per-seed CSVs in a run dir
std::vector<std::string> export_run(const std::string& run_dir);

}  // namespace capseg::runhub

#endif  // CAPSEG_RUNHUB_HPP
