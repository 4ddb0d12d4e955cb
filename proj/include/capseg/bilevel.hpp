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

#ifndef CAPSEG_BILEVEL_HPP
#define CAPSEG_BILEVEL_HPP

#include <optional>

#include "capseg/capl.hpp"
#include "capseg/minisam.hpp"
#include "capseg/objectives.hpp"
#include "capseg/promptkit.hpp"
#include "capseg/synthgen.hpp"

namespace capseg::bilevel {

// Bi-level training: an inner loop of K plain gradient-descent steps takes
// the prompt learner parameters theta to theta'(theta) with the segmentation
// parameters phi frozen; the outer objective, evaluated at theta', updates
// (theta, phi) with Adam. In unrolled mode the inner gradients are graph
// nodes, so the outer gradient differentiates through the inner updates.

enum class Arm {
  causal,     // full: gates + calibration, inner consistency + entity losses
  task,       // task module only, no calibration, lambda_en = 0
  learnable,  // gates trained by the outer loss alone (soft-prompt analog)
  fixed,      // no prompt learner at all
  plug        // train phi without the learner, then the learner alone on top
};

const char* arm_name(Arm a);
Arm arm_from_name(const std::string& name);

struct BiLevelConfig {
  int inner_steps = 1;  // K
  double inner_lr = 0.1;
  double outer_lr = 5e-3;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_en = 0.6;
  double lambda_xi = 0.4;
  int n_t = 2;
  bool unrolled = true;      // false: first-order (theta' treated constant)
  bool outer_first = false;  // alternate phi-then-theta without unrolling
  int epochs = 40;
  int batch_size = 8;
  double train_jitter = 0.25;
  double warmup_jitter = 0.1;
  int warmup_epochs = 160;
  double warmup_lr = 3e-3;  // pretraining substitute: own lr, no weight decay
  // optional path stem for sharing the warm-up checkpoint between arms with
  // the same seed; empty disables caching
  std::string warmup_cache_stem;
  promptkit::PromptMode prompt_mode = promptkit::PromptMode::box;
  objectives::SegLossKind seg_kind = objectives::SegLossKind::bce_dice;
  int snapshot_every = 0;  // 0: epochs/8, floored to >= 1
  std::uint64_t seed = 0;
  Arm arm = Arm::causal;
  bool full_finetune = false;  // ablation: train every phi parameter, no lora

  void validate() const;
};

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps, double weight_decay);
  void step(minisam::ParamStore& store, const std::vector<std::string>& names,
            const std::vector<ad::Tensor>& grads);
  void set_lr(double lr) { lr_ = lr; }
  io::NamedArrays to_arrays(const std::string& prefix) const;
  void from_arrays(const io::NamedArrays& arrays, const std::string& prefix);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  long long t_ = 0;
  std::map<std::string, Moments> state_;
};

// one training batch: samples, their (cacheable) image tokens, and n_t
// independently jittered annotations per sample
struct BatchData {
  std::vector<const synthgen::SceneSample*> samples;
  std::vector<ad::Tensor> image_tokens;
  std::vector<std::vector<promptkit::PromptAnnotation>> member_anns;  // [n_t][sample]
  int n_t = 0;
};

BatchData make_batch(const minisam::Model& model,
                     const std::vector<const synthgen::SceneSample*>& samples, int n_t,
                     double jitter, promptkit::PromptMode mode, std::uint64_t seed,
                     const std::vector<ad::Tensor>* token_cache = nullptr);

struct EvalOptions {
  bool use_gates = true;
  bool use_calib = true;
  double lambda_xi = 0.4;
  objectives::SegLossKind seg_kind = objectives::SegLossKind::bce_dice;
};

struct BatchLosses {
  std::vector<ad::Tensor> per_distribution;  // batch-mean seg loss per member
  ad::Tensor entity_total;                   // batch- and member-mean entity loss
  ad::Tensor entity_mask;
  ad::Tensor entity_l1;
};

BatchLosses eval_batch(const minisam::Model& model, const capl::Capl& cp,
                       const minisam::ParamView& theta, const BatchData& batch,
                       const EvalOptions& opts);

using ThetaOverlay = std::map<std::string, ad::Tensor>;

// K gradient-descent steps on L_CaPL = task + entity from the current theta
// leaves; the overlay holds theta'. inner_before/inner_after report the
// inner objective at theta and theta'.
ThetaOverlay inner_unroll(const minisam::Model& model, const capl::Capl& cp,
                          const BatchData& batch, const EvalOptions& opts, int k_steps,
                          double inner_lr, bool unrolled, double* inner_before = nullptr,
                          double* inner_after = nullptr);

struct EpochRow {
  int epoch = 0;
  std::vector<double> seg_per_group;
  double task_loss = 0, entity_loss = 0, outer_total = 0;
  double base_dice = 0, target_dice = 0;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochRow> log;
  double best_target_dice = 0.0;
  int best_epoch = -1;
  std::string best_checkpoint;
  std::string final_checkpoint;
  std::vector<std::string> snapshots;
  bool diverged = false;
};

class Trainer {
 public:
  Trainer(const synthgen::DatasetSplit& data, const minisam::ModelConfig& mc,
          const BiLevelConfig& bc);

  // full pipeline: warm-up, freeze, adapters, bi-level epochs, logging,
  // checkpoints under out_dir (empty out_dir: keep everything in memory)
  TrainResult train(const std::string& out_dir);

  objectives::MetricsReport evaluate(const std::vector<synthgen::SceneSample>& samples,
                                     const std::string& split_tag, double jitter,
                                     std::uint64_t jitter_seed);

  minisam::Model& model() { return *model_; }
  capl::Capl& capl_module() { return *capl_; }
  const BiLevelConfig& config() const { return bc_; }

  io::NamedArrays checkpoint_arrays() const;
  void save_checkpoint(const std::string& path_stem) const;
  void load_checkpoint(const std::string& path_stem);
  void prepare_for_bilevel();  // freeze trunk, add adapters, build caches

  // per-distribution theta-gradient disagreement on a fixed probe batch:
  // ||g_i - mean|| rms over members divided by ||mean||; the confounder
  // cancellation audit tracks this across snapshots
  double theta_grad_disagreement(std::uint64_t probe_seed, int probe_size);

  // per-distribution seg losses under fresh annotations of given jitter
  std::vector<double> per_distribution_losses(const std::vector<synthgen::SceneSample>& samples,
                                              double jitter, std::uint64_t seed);

  // attention/calibration sparsity statistics under clean prompts: mean
  // post-softmax image->prompt attention on entity columns, mean |calibration|
  // on those slices, and the pairwise inter-entity attention-mask overlap
  struct SparsityStats {
    double mean_entity_attention = 0.0;
    double mean_abs_xi = 0.0;
    double inter_entity_mask_iou = 0.0;
  };
  SparsityStats sparsity_stats(const std::vector<synthgen::SceneSample>& samples);

  EvalOptions eval_options() const;
  int epochs_done() const { return epoch_done_; }

  // the learner configuration a trainer derives from (model config, seed)
  static capl::CaplConfig derive_capl_config(const minisam::ModelConfig& mc, std::uint64_t seed);

 private:
  void warmup();
  void rebuild_token_cache();
  void train_step(const std::vector<const synthgen::SceneSample*>& batch_samples, int epoch,
                  int batch_index, objectives::LossReport* report);
  BatchData assemble_batch(const std::vector<const synthgen::SceneSample*>& samples, int n_t,
                           double jitter, std::uint64_t seed);
  std::vector<std::string> phi_names() const;
  std::vector<std::string> theta_names() const;

  const synthgen::DatasetSplit* data_;
  minisam::ModelConfig mc_;
  BiLevelConfig bc_;
  std::unique_ptr<minisam::Model> model_;
  std::unique_ptr<capl::Capl> capl_;
  std::unique_ptr<Adam> adam_theta_;
  std::unique_ptr<Adam> adam_phi_;
  std::map<const synthgen::SceneSample*, ad::Tensor> token_cache_;
  bool prepared_ = false;
  int epoch_done_ = 0;
  bool plug_phase_b_ = false;
};

struct HypergradReport {
  int k_steps = 0;
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  double runtime_seconds = 0.0;
  int n_coords = 0;
};

// tiny double-precision model (<1k theta parameters): compares the unrolled
// hypergradient against central finite differences coordinate-wise
HypergradReport hypergrad_check(int k_steps, std::uint64_t seed, double inner_lr = 0.1,
                                double fd_eps = 1e-4);

}  // namespace capseg::bilevel

#endif  // CAPSEG_BILEVEL_HPP
